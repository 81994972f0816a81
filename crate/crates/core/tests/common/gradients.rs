use efa_core::attention::{AttentionKind, Direction, LayerShape, StackConfig};
use efa_core::checkpoint::SavedModel;
use efa_core::data::{Sequence, SequenceBatch};
use efa_core::efa::{
    instantiate_example, AttributeEncoderConfig, CategoricalConfig, EfaConfig, EfaModel, ExampleDims, ExampleKind, InputProjection,
    MaskEmbedding, Readout, SegmentConfig, ValueConfig, ValueEmbed, ValueTokens,
};
use efa_core::experiment::synthetic_efa_config;
use efa_core::fm::{FmConfig, FmModel, FmVariant};
use efa_core::heads::ExpFamHead;
use efa_core::model::SequenceModel;
use efa_core::tensor::Graph;
use efa_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const INSTANCES: u64 = 5;

const VOCAB: usize = 5;
const MAX_LEN: usize = 4;

fn as_model(m: &mut SavedModel) -> &mut dyn SequenceModel {
    match m {
        SavedModel::Efa(e) => e,
        SavedModel::Fm(f) => f,
    }
}

fn dims(head: ExpFamHead) -> ExampleDims {
    ExampleDims {
        vocab: VOCAB,
        max_len: MAX_LEN,
        dim: 3,
        value_dim: 2,
        layers: 2,
        heads: 2,
        residual: true,
        ffn_width: Some(3),
        layer_norm: false,
        readout_hidden: vec![3],
        ordered: true,
        tau_dim: 2,
        attribute_hidden: 3,
        head,
    }
}

fn linear_config(direction: Direction) -> EfaConfig {
    let stack = StackConfig::new(vec![LayerShape::plain(), LayerShape::plain()], AttentionKind::Linear);
    EfaConfig {
        vocab: VOCAB,
        max_len: MAX_LEN,
        direction,
        categorical: Some(CategoricalConfig {
            dim: 2,
            positional: false,
            stack: stack.clone(),
        }),
        value: Some(ValueConfig {
            tokens: ValueTokens::Embeddings { dim: 2, center: false },
            embed: ValueEmbed::Affine { dim: 1 },
            mask: MaskEmbedding::Zero,
            segments: None,
            input_projection: None,
            positional: false,
            stack,
            readout: Readout::LastEntry { scale: 0.7 },
            head: ExpFamHead::gaussian(2.0).unwrap(),
        }),
    }
}

fn identity_embed_config(direction: Direction) -> EfaConfig {
    let mut c = linear_config(direction);
    let v = c.value.as_mut().unwrap();
    v.embed = ValueEmbed::Identity;
    v.mask = MaskEmbedding::Learned;
    v.stack = StackConfig::new(
        vec![LayerShape {
            heads: 2,
            residual: true,
            ffn_width: None,
            layer_norm: true,
        }],
        AttentionKind::Softmax,
    );
    v.readout = Readout::Mlp {
        hidden: vec![],
        final_bias: false,
    };
    v.head = ExpFamHead::PoissonOnePlus;
    c
}

fn spatiotemporal(lag: bool) -> EfaConfig {
    let mut d = dims(ExpFamHead::gaussian(1.0).unwrap());
    d.layer_norm = true;
    let mut c = instantiate_example(ExampleKind::SpatioTemporalGaussian, &d, Direction::Bidirectional).unwrap();
    let v = c.value.as_mut().unwrap();
    v.input_projection = Some(InputProjection { hidden: 3, dim: 3 });
    if lag {
        v.segments = Some(SegmentConfig { count: 2, dim: 2 });
    }
    c
}

fn fm(variant: FmVariant, direction: Direction, knn: Option<usize>) -> FmModel {
    let attribute = (variant == FmVariant::GaussianKnn).then_some(AttributeEncoderConfig {
        tau_dim: 2,
        hidden: 3,
        dim: 3,
    });
    let mut m = FmModel::new(
        FmConfig {
            variant,
            vocab: VOCAB,
            dim: 3,
            direction,
            attribute,
            knn,
            variance: 1.3,
        },
        0,
    )
    .unwrap();
    if let Some(k) = knn {
        m.set_neighbors((0..VOCAB).map(|s| (1..=k).map(|o| (s + o) % VOCAB).collect()).collect())
            .unwrap();
    }
    m
}

/// Every model family and head the library builds, by name.
pub fn variants() -> Vec<(String, SavedModel)> {
    use Direction::{Bidirectional as Bi, Unidirectional as Uni};
    let mut out = Vec::new();
    for direction in [Uni, Bi] {
        let tag = if direction == Uni { "uni" } else { "bi" };
        let efa = |c: EfaConfig| SavedModel::Efa(EfaModel::new(c, 0).unwrap());
        out.push((
            format!("efa/baskets/{tag}"),
            efa(instantiate_example(ExampleKind::Baskets, &dims(ExpFamHead::gaussian(1.0).unwrap()), direction).unwrap()),
        ));
        for head in [ExpFamHead::PoissonShifted, ExpFamHead::PoissonOnePlus] {
            out.push((
                format!("efa/movie-ratings/{}/{tag}", head.name()),
                efa(instantiate_example(ExampleKind::MovieRatings, &dims(head), direction).unwrap()),
            ));
        }
        let shape = LayerShape {
            heads: 2,
            residual: true,
            ffn_width: None,
            layer_norm: false,
        };
        out.push((
            format!("efa/synthetic/{tag}"),
            efa(synthetic_efa_config(3, 3, shape, 2, vec![4], true, direction)),
        ));
        out.push((format!("efa/linear-attention/{tag}"), efa(linear_config(direction))));
        out.push((format!("efa/identity-value/{tag}"), efa(identity_embed_config(direction))));
        for variant in [
            FmVariant::Categorical,
            FmVariant::GaussianRatings,
            FmVariant::PoissonV1,
            FmVariant::PoissonV2,
        ] {
            out.push((format!("fm/{variant:?}/{tag}"), SavedModel::Fm(fm(variant, direction, None))));
        }
    }
    out.push((
        "efa/spatiotemporal".into(),
        SavedModel::Efa(EfaModel::new(spatiotemporal(false), 0).unwrap()),
    ));
    out.push((
        "efa/spatiotemporal-lag".into(),
        SavedModel::Efa(EfaModel::new(spatiotemporal(true), 0).unwrap()),
    ));
    out.push((
        "fm/GaussianKnn/all".into(),
        SavedModel::Fm(fm(FmVariant::GaussianKnn, Direction::Bidirectional, None)),
    ));
    out.push((
        "fm/GaussianKnn/k2".into(),
        SavedModel::Fm(fm(FmVariant::GaussianKnn, Direction::Bidirectional, Some(2))),
    ));
    out
}

fn segment_count(m: &SavedModel) -> Option<usize> {
    match m {
        SavedModel::Efa(e) => e.config.value.as_ref().and_then(|v| v.segments.as_ref()).map(|s| s.count),
        SavedModel::Fm(_) => None,
    }
}

/// A random batch the model accepts, with values drawn from its head's support.
pub fn random_batch(model: &SavedModel, rng: &mut ChaCha8Rng) -> SequenceBatch {
    let m: &dyn SequenceModel = match model {
        SavedModel::Efa(e) => e,
        SavedModel::Fm(f) => f,
    };
    let head = m.value_head();
    let table = matches!(model, SavedModel::Efa(e) if e.config.value.as_ref().is_some_and(|v| matches!(v.embed, ValueEmbed::Table { .. })));
    let segments = segment_count(model);
    let sequences = (0..3)
        .map(|_| {
            let len = rng.gen_range(2..=MAX_LEN);
            let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..VOCAB)).collect();
            let mut s = Sequence::tokens(tokens);
            if let Some(h) = head {
                s.values = Some(
                    (0..len)
                        .map(|_| match h {
                            _ if table => rng.gen_range(1..=3) as f64,
                            ExpFamHead::GaussianKnownVar { .. } => rng.gen_range(-2.0..2.0),
                            ExpFamHead::PoissonShifted => rng.gen_range(1..=4) as f64,
                            _ => rng.gen_range(0..=3) as f64,
                        })
                        .collect(),
                );
            }
            if let Some(count) = segments {
                s.segments = Some((0..len).map(|_| rng.gen_range(0..count)).collect());
            }
            let mut targets: Vec<bool> = (0..len).map(|_| rng.gen_bool(0.7)).collect();
            targets[0] = true;
            s.targets = Some(targets);
            s
        })
        .collect();
    let mut b = SequenceBatch::new(VOCAB, sequences).unwrap();
    b.attributes = Some(Tensor::from_fn(VOCAB, 2, |_, _| rng.gen_range(-1.0..1.0)));
    b
}

fn loss(model: &dyn SequenceModel, batch: &SequenceBatch, seqs: &[usize]) -> f64 {
    let mut g = Graph::new();
    let bind = model.params().bind(&mut g, false);
    let (l, _) = model.loss_terms(&mut g, &bind, batch, seqs).unwrap();
    g.value(l).item()
}

fn relative_error(fd: f64, analytic: f64) -> f64 {
    let diff = (fd - analytic).abs();
    // Below this both values are numerically zero.
    if diff < 1e-9 {
        return 0.0;
    }
    diff / fd.abs().max(analytic.abs())
}

#[derive(Debug, Default)]
pub struct GradientSummary {
    pub variants: usize,
    pub coordinates: usize,
    pub worst: f64,
    pub worst_at: String,
}

/// Central differences against reverse-mode gradients for every coordinate
/// of every parameter, on `INSTANCES` random instances of each variant.
pub fn gradient_suite() -> GradientSummary {
    let mut summary = GradientSummary::default();
    for (name, mut saved) in variants() {
        summary.variants += 1;
        for instance in 0..INSTANCES {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 * instance + summary.variants as u64);
            let model = as_model(&mut saved);
            for (_, t) in model.params_mut().iter_mut() {
                for v in t.data_mut() {
                    *v = rng.gen_range(-0.6..0.6);
                }
            }
            let batch = random_batch(&saved, &mut rng);
            let model = as_model(&mut saved);
            let seqs: Vec<usize> = (0..batch.len()).collect();
            let mut g = Graph::new();
            let bind = model.params().bind(&mut g, true);
            let (l, _) = model.loss_terms(&mut g, &bind, &batch, &seqs).unwrap();
            g.backward(l).unwrap();
            let grads = model.params().gradients(&g, &bind);
            let names: Vec<String> = model.params().names().map(String::from).collect();
            for (pname, grad) in names.iter().zip(grads) {
                for idx in 0..grad.len() {
                    let orig = model.params().get(pname).unwrap().data()[idx];
                    model.params_mut().get_mut(pname).unwrap().data_mut()[idx] = orig + STEP;
                    let up = loss(model, &batch, &seqs);
                    model.params_mut().get_mut(pname).unwrap().data_mut()[idx] = orig - STEP;
                    let down = loss(model, &batch, &seqs);
                    model.params_mut().get_mut(pname).unwrap().data_mut()[idx] = orig;
                    let err = relative_error((up - down) / (2.0 * STEP), grad[idx]);
                    summary.coordinates += 1;
                    if err > summary.worst {
                        summary.worst = err;
                        summary.worst_at = format!("{name} #{instance} {pname}[{idx}]");
                    }
                }
            }
        }
    }
    summary
}
