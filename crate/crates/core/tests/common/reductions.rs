use efa_core::attention::Direction;
use efa_core::data::{Sequence, SequenceBatch};
use efa_core::efa::{attribute_encode, AttributeEncoderConfig};
use efa_core::fm::{construct_equivalent_efa, FmConfig, FmModel, FmVariant, Reduction};
use efa_core::model::SequenceModel;
use efa_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TRIALS: u64 = 50;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

pub fn fm(variant: FmVariant, k: usize, d: usize, attribute: Option<AttributeEncoderConfig>) -> FmModel {
    FmModel::new(
        FmConfig {
            variant,
            vocab: d,
            dim: k,
            direction: Direction::Bidirectional,
            attribute,
            knn: None,
            variance: 1.0,
        },
        0,
    )
    .unwrap()
}

fn dot_cols(a: &Tensor, i: usize, b: &Tensor, j: usize) -> f64 {
    (0..a.rows()).map(|r| a.get(r, i) * b.get(r, j)).sum()
}

/// Largest absolute deviation over `TRIALS` random instances.
pub fn categorical_worst() -> f64 {
    let mut worst: f64 = 0.0;
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let (k, d, len) = (rng.gen_range(1..=8), rng.gen_range(2..=10), rng.gen_range(2..=6));
        let mut model = fm(FmVariant::Categorical, k, d, None);
        let (rho, alpha) = (random_tensor(&mut rng, k, d), random_tensor(&mut rng, k, d));
        model.params.set("fm.rho", rho.clone()).unwrap();
        model.params.set("fm.alpha", alpha.clone()).unwrap();
        let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..d)).collect();
        let batch = SequenceBatch::new(d, vec![Sequence::tokens(tokens.clone())]).unwrap();

        let efa = construct_equivalent_efa(Reduction::P1, &model, len).unwrap();
        let probs = efa.categorical_probs(&batch, 0).unwrap();
        for i in 0..len {
            let logits: Vec<f64> = (0..d)
                .map(|r| {
                    (0..len)
                        .filter(|&j| j != i)
                        .map(|j| dot_cols(&rho, r, &alpha, tokens[j]))
                        .sum::<f64>()
                        / (len - 1) as f64
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for r in 0..d {
                worst = worst.max((probs.get(r, i) - (logits[r] - m).exp() / z).abs());
            }
        }
    }
    worst
}

/// Largest absolute deviation over `TRIALS` random instances.
pub fn attribute_worst() -> f64 {
    let mut worst: f64 = 0.0;
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
        let (k, d, len) = (rng.gen_range(1..=8), rng.gen_range(2..=10), rng.gen_range(2..=6));
        let (tau, hidden) = (rng.gen_range(1..=3), rng.gen_range(1..=5));
        let mut model = fm(
            FmVariant::GaussianKnn,
            k,
            d,
            Some(AttributeEncoderConfig {
                tau_dim: tau,
                hidden,
                dim: k,
            }),
        );
        let (g1, g2) = (random_tensor(&mut rng, hidden, tau), random_tensor(&mut rng, k, hidden));
        model.params.set("fm.h.g1", g1.clone()).unwrap();
        model.params.set("fm.h.g2", g2.clone()).unwrap();
        let attrs = random_tensor(&mut rng, d, tau);
        let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..d)).collect();
        let values: Vec<f64> = (0..len).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut batch = SequenceBatch::new(d, vec![Sequence::with_values(tokens.clone(), values.clone())]).unwrap();
        batch.attributes = Some(attrs.clone());

        let h: Vec<Vec<f64>> = tokens
            .iter()
            .map(|&t| attribute_encode(&g1, &g2, attrs.row_slice(t)).unwrap())
            .collect();
        let efa = construct_equivalent_efa(Reduction::P2, &model, len).unwrap();
        let got = efa.value_natural_params(&batch, 0).unwrap();
        let fm_got = model.value_naturals(&batch, &[0]).unwrap().remove(0);
        for i in 0..len {
            let expect: f64 = (0..len)
                .filter(|&j| j != i)
                .map(|j| values[j] * h[i].iter().zip(&h[j]).map(|(a, b)| a * b).sum::<f64>())
                .sum();
            worst = worst.max((got[i].unwrap() - expect).abs());
            worst = worst.max((fm_got[i].unwrap() - expect).abs());
        }
    }
    worst
}

/// Largest absolute deviation over `TRIALS` random instances.
pub fn ratings_worst() -> f64 {
    let mut worst: f64 = 0.0;
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + trial);
        let (k, d, len) = (rng.gen_range(1..=8), rng.gen_range(2..=10), rng.gen_range(2..=6));
        let variant = if trial % 2 == 0 {
            FmVariant::PoissonV1
        } else {
            FmVariant::PoissonV2
        };
        let mut model = fm(variant, k, d, None);
        let (rho, alpha) = (random_tensor(&mut rng, k, d), random_tensor(&mut rng, k, d));
        model.params.set("fm.rho", rho.clone()).unwrap();
        model.params.set("fm.alpha", alpha.clone()).unwrap();
        let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..d)).collect();
        let values: Vec<f64> = (0..len).map(|_| rng.gen_range(1..=3) as f64).collect();
        let batch = SequenceBatch::new(d, vec![Sequence::with_values(tokens.clone(), values.clone())]).unwrap();

        let efa = construct_equivalent_efa(Reduction::P3, &model, len).unwrap();
        assert_eq!(efa.value_head(), model.value_head());
        let got = efa.value_natural_params(&batch, 0).unwrap();
        for i in 0..len {
            let expect: f64 = (0..len)
                .filter(|&j| j != i)
                .map(|j| values[j] * dot_cols(&rho, tokens[i], &alpha, tokens[j]))
                .sum::<f64>()
                / (len - 1) as f64;
            worst = worst.max((got[i].unwrap() - expect).abs());
        }
    }
    worst
}
