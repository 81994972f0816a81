//! Config-driven experiment runs and their on-disk artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionKind, Direction, LayerShape, StackConfig};
use crate::checkpoint::{Checkpoint, SavedModel};
use crate::data::baskets::{preprocess_baskets, read_baskets_csv, split_baskets};
use crate::data::geo::haversine_knn;
use crate::data::ratings::{preprocess_ratings_exp1, preprocess_ratings_exp2, read_ratings_csv};
use crate::data::synthetic::{oracle_mse, synthetic_splits, MOVIES};
use crate::data::temperature::{load_temperatures, read_temperatures_csv, YearRanges};
use crate::data::{Sequence, SequenceBatch, Splits};
use crate::dumps::{
    export_attention_weights, export_qkv_embeddings, position_names, top_copurchase, uniform_context_weights, write_matrix_csv,
    AttentionDump, Component,
};
use crate::efa::{
    instantiate_example, AttributeEncoderConfig, CategoricalConfig, EfaConfig, EfaModel, ExampleDims, ExampleKind, InputProjection,
    MaskEmbedding, Readout, SegmentConfig, ValueConfig, ValueEmbed, ValueTokens,
};
use crate::error::{Error, Result};
use crate::fm::{FmConfig, FmModel, FmVariant};
use crate::heads::ExpFamHead;
use crate::model::SequenceModel;
use crate::tensor::Tensor;
use crate::theory::{
    diversity_matrices, linear_identifiability_probe, plant_linear_map, theta_norm, DiversityReport, IdentifiabilityProbeReport,
};
use crate::train::{evaluate, fit, FitConfig, FitReport, Metric, MetricValue};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Synthetic,
    RatingsSeq,
    RatingsValues,
    Baskets,
    Temperature,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    Efa,
    Fm,
}

impl ModelFamily {
    pub fn label(self) -> &'static str {
        match self {
            ModelFamily::Efa => "EFA",
            ModelFamily::Fm => "FM",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadChoice {
    Gaussian,
    Categorical,
    PoissonShifted,
    PoissonOnePlus,
}

/// A flat TOML run description. Unset hyperparameters take the defaults of
/// the chosen experiment; [`ExperimentConfig::resolved`] fills them in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub model: ModelFamily,
    pub direction: Direction,
    pub head: Option<HeadChoice>,
    #[serde(default)]
    pub seed: u64,
    /// Input CSV; relative paths are taken from the config file's directory.
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,

    pub dim: Option<usize>,
    pub value_dim: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub ffn_width: Option<usize>,
    pub layer_norm: Option<bool>,
    pub readout_hidden: Option<Vec<usize>>,
    pub attribute_hidden: Option<usize>,
    pub projection_hidden: Option<usize>,
    pub positional: Option<bool>,
    pub variance: Option<f64>,
    pub lag: Option<bool>,
    pub knn: Option<usize>,

    pub learning_rate: Option<f64>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub batch_size: Option<usize>,

    pub train_users: Option<usize>,
    pub val_users: Option<usize>,
    pub test_users: Option<usize>,
    pub top_n: Option<usize>,
    pub min_basket_count: Option<usize>,
    pub min_items: Option<usize>,
    pub test_fraction: Option<f64>,
    pub val_fraction: Option<f64>,
    pub train_years: Option<(i32, i32)>,
    pub val_years: Option<(i32, i32)>,
    pub test_years: Option<(i32, i32)>,
    /// Test sequences whose attention maps are written to `dumps/`.
    pub dump_sequences: Option<usize>,
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentKind, model: ModelFamily, direction: Direction) -> Self {
        ExperimentConfig {
            experiment,
            model,
            direction,
            head: None,
            seed: 0,
            data: None,
            out: None,
            dim: None,
            value_dim: None,
            layers: None,
            heads: None,
            ffn_width: None,
            layer_norm: None,
            readout_hidden: None,
            attribute_hidden: None,
            projection_hidden: None,
            positional: None,
            variance: None,
            lag: None,
            knn: None,
            learning_rate: None,
            max_epochs: None,
            patience: None,
            batch_size: None,
            train_users: None,
            val_users: None,
            test_users: None,
            top_n: None,
            min_basket_count: None,
            min_items: None,
            test_fraction: None,
            val_fraction: None,
            train_years: None,
            val_years: None,
            test_years: None,
            dump_sequences: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses a config file, resolving `data` against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingPath { path: path.to_path_buf() },
            _ => Error::Io(e),
        })?;
        let mut c = Self::from_toml(&text)?;
        if let (Some(data), Some(dir)) = (&c.data, path.parent()) {
            if data.is_relative() {
                c.data = Some(dir.join(data));
            }
        }
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn default_head(&self) -> HeadChoice {
        match self.experiment {
            ExperimentKind::Synthetic | ExperimentKind::Temperature => HeadChoice::Gaussian,
            ExperimentKind::RatingsSeq | ExperimentKind::Baskets => HeadChoice::Categorical,
            ExperimentKind::RatingsValues => HeadChoice::PoissonShifted,
        }
    }

    /// Rejects combinations no experiment supports.
    pub fn validate(&self) -> Result<()> {
        use ExperimentKind::*;
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        let head = self.head.unwrap_or_else(|| self.default_head());
        let head_ok = match self.experiment {
            Synthetic | Temperature => head == HeadChoice::Gaussian,
            RatingsSeq | Baskets => head == HeadChoice::Categorical,
            RatingsValues => matches!(head, HeadChoice::PoissonShifted | HeadChoice::PoissonOnePlus),
        };
        if !head_ok {
            return Err(Error::Config(format!(
                "head {head:?} does not fit the {:?} experiment",
                self.experiment
            )));
        }
        if self.experiment == Temperature {
            if self.positional == Some(true) {
                return bad("the temperature experiment has no site order, so positional embeddings are not allowed");
            }
            if self.direction != Direction::Bidirectional {
                return bad("the temperature experiment conditions on all other sites and must be bidirectional");
            }
        }
        if self.lag == Some(true) && (self.experiment != Temperature || self.model != ModelFamily::Efa) {
            return bad("lag applies to the EFA temperature model only");
        }
        if let Some(k) = self.knn {
            if self.experiment != Temperature || self.model != ModelFamily::Fm {
                return bad("knn applies to the FM temperature model only");
            }
            if k == 0 {
                return bad("knn must be at least 1");
            }
        }
        if self.model == ModelFamily::Fm && self.positional == Some(true) {
            return bad("the FM baseline has no positional embeddings");
        }
        match (self.experiment, &self.data) {
            (Synthetic, Some(_)) => return bad("synthetic data is generated; remove `data`"),
            (Synthetic, None) => {}
            (_, None) => return bad("this experiment needs a `data` path"),
            _ => {}
        }
        if let Some(v) = self.variance {
            if !(v > 0.0) {
                return bad("variance must be positive");
            }
        }
        for (name, f) in [("test_fraction", self.test_fraction), ("val_fraction", self.val_fraction)] {
            if let Some(f) = f {
                if !(0.0..1.0).contains(&f) {
                    return Err(Error::Config(format!("{name} must lie in [0, 1)")));
                }
            }
        }
        for (name, v) in [
            ("dim", self.dim),
            ("value_dim", self.value_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("max_epochs", self.max_epochs),
            ("train_users", self.train_users),
            ("val_users", self.val_users),
            ("test_users", self.test_users),
            ("top_n", self.top_n),
        ] {
            if v == Some(0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        self.resolved().fit_config().validate()
    }

    /// The same config with every experiment default made explicit.
    pub fn resolved(&self) -> ExperimentConfig {
        use ExperimentKind::*;
        let mut c = self.clone();
        let efa = self.model == ModelFamily::Efa;
        c.head.get_or_insert(self.default_head());
        match self.experiment {
            Synthetic => {
                c.dim.get_or_insert(16);
                c.value_dim.get_or_insert(16);
                c.learning_rate.get_or_insert(if efa { 3e-3 } else { 1e-2 });
                c.max_epochs.get_or_insert(if efa { 40 } else { 50 });
                c.batch_size.get_or_insert(64);
                c.readout_hidden.get_or_insert(vec![32]);
                c.train_users.get_or_insert(5000);
                c.val_users.get_or_insert(1000);
                c.test_users.get_or_insert(1000);
                if efa {
                    c.positional.get_or_insert(true);
                }
            }
            RatingsSeq | RatingsValues | Baskets => {
                c.dim.get_or_insert(32);
                c.value_dim.get_or_insert(32);
                c.learning_rate.get_or_insert(1e-3);
                c.max_epochs.get_or_insert(200);
                c.readout_hidden.get_or_insert(vec![32]);
                c.top_n.get_or_insert(50);
                if self.experiment == Baskets {
                    c.min_basket_count.get_or_insert(50_000);
                    c.min_items.get_or_insert(10);
                    c.test_fraction.get_or_insert(0.05);
                    c.val_fraction.get_or_insert(0.1);
                }
                if efa {
                    c.positional.get_or_insert(true);
                }
            }
            Temperature => {
                c.dim.get_or_insert(32);
                c.value_dim.get_or_insert(32);
                c.attribute_hidden.get_or_insert(128);
                c.learning_rate.get_or_insert(1e-3);
                c.max_epochs.get_or_insert(200);
                if efa {
                    c.layers.get_or_insert(4);
                    c.ffn_width.get_or_insert(64);
                    c.layer_norm.get_or_insert(true);
                    c.projection_hidden.get_or_insert(64);
                    c.readout_hidden.get_or_insert(vec![128, 16]);
                    c.lag.get_or_insert(false);
                    c.positional.get_or_insert(false);
                }
                let r = YearRanges::default();
                c.train_years.get_or_insert(r.train);
                c.val_years.get_or_insert(r.val);
                c.test_years.get_or_insert(r.test);
            }
        }
        if efa {
            c.layers.get_or_insert(2);
            c.heads.get_or_insert(2);
            c.layer_norm.get_or_insert(false);
        }
        c.variance.get_or_insert(1.0);
        c.patience.get_or_insert(10);
        c.dump_sequences.get_or_insert(2);
        c
    }

    pub fn fit_config(&self) -> FitConfig {
        let d = FitConfig::default();
        FitConfig {
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            max_epochs: self.max_epochs.unwrap_or(d.max_epochs),
            patience: self.patience.unwrap_or(d.patience),
            batch_size: self.batch_size,
            seed: self.seed.wrapping_add(2),
            ..d
        }
    }

    fn head(&self) -> Result<ExpFamHead> {
        Ok(match self.head.unwrap_or_else(|| self.default_head()) {
            HeadChoice::Gaussian => ExpFamHead::gaussian(self.variance.unwrap_or(1.0))?,
            HeadChoice::Categorical => ExpFamHead::Categorical { classes: 2 },
            HeadChoice::PoissonShifted => ExpFamHead::PoissonShifted,
            HeadChoice::PoissonOnePlus => ExpFamHead::PoissonOnePlus,
        })
    }
}

/// The value-only model used for the synthetic ratings: categorical movie
/// embeddings stacked with an MLP rating embedding and a learned mask.
pub fn synthetic_efa_config(
    dim: usize,
    value_dim: usize,
    shape: LayerShape,
    layers: usize,
    readout_hidden: Vec<usize>,
    positional: bool,
    direction: Direction,
) -> EfaConfig {
    EfaConfig {
        vocab: MOVIES,
        max_len: MOVIES,
        direction,
        categorical: None,
        value: Some(ValueConfig {
            tokens: ValueTokens::Embeddings { dim, center: false },
            embed: ValueEmbed::Mlp {
                hidden: value_dim,
                dim: value_dim,
            },
            mask: MaskEmbedding::Learned,
            segments: None,
            input_projection: None,
            positional,
            stack: StackConfig::new(vec![shape; layers], AttentionKind::Softmax),
            readout: Readout::Mlp {
                hidden: readout_hidden,
                final_bias: true,
            },
            head: ExpFamHead::gaussian(1.0).expect("unit variance"),
        }),
    }
}

/// Loaded data for one run.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub splits: Splits,
    pub vocab: usize,
    pub max_len: usize,
    pub labels: Option<Vec<String>>,
    /// Sparsity of the preprocessed users × items matrix, where meaningful.
    pub sparsity: Option<f64>,
    /// Site coordinates of the temperature data.
    pub coords: Option<Vec<(f64, f64)>>,
}

fn data_path(c: &ExperimentConfig) -> Result<&Path> {
    let p = c
        .data
        .as_deref()
        .ok_or_else(|| Error::Config("this experiment needs a `data` path".into()))?;
    if !p.exists() {
        return Err(Error::MissingPath { path: p.to_path_buf() });
    }
    Ok(p)
}

/// Loads or generates the data of a resolved config.
pub fn load_data(c: &ExperimentConfig) -> Result<ExperimentData> {
    let c = c.resolved();
    let finish = |splits: Splits, labels: Option<Vec<String>>, sparsity: Option<f64>, coords| {
        let vocab = splits.train.vocab;
        let max_len = [&splits.train, &splits.val, &splits.test]
            .iter()
            .map(|b| b.max_len())
            .max()
            .unwrap_or(1);
        ExperimentData {
            splits,
            vocab,
            max_len,
            labels,
            sparsity,
            coords,
        }
    };
    Ok(match c.experiment {
        ExperimentKind::Synthetic => {
            let splits = synthetic_splits(c.train_users.unwrap(), c.val_users.unwrap(), c.test_users.unwrap(), c.seed)?;
            let labels = splits.train.labels.clone();
            finish(splits, labels, Some(0.0), None)
        }
        ExperimentKind::RatingsSeq | ExperimentKind::RatingsValues => {
            let events = read_ratings_csv(data_path(&c)?)?;
            let top_n = c.top_n.unwrap();
            let data = if c.experiment == ExperimentKind::RatingsSeq {
                preprocess_ratings_exp1(&events, top_n, c.seed)?
            } else {
                preprocess_ratings_exp2(&events, top_n, c.seed)?
            };
            let labels = Some(data.items.iter().map(|i| i.to_string()).collect());
            let mut splits = data.splits;
            if c.experiment == ExperimentKind::RatingsSeq {
                for b in [&mut splits.train, &mut splits.val, &mut splits.test] {
                    for s in &mut b.sequences {
                        s.values = None;
                    }
                }
            }
            finish(splits, labels, Some(data.all.sparsity()), None)
        }
        ExperimentKind::Baskets => {
            let baskets = read_baskets_csv(data_path(&c)?)?;
            let all = preprocess_baskets(&baskets, c.min_basket_count.unwrap(), c.min_items.unwrap())?;
            let (rest, test) = split_baskets(&all, c.test_fraction.unwrap(), c.seed);
            let (train, val) = split_baskets(&rest, c.val_fraction.unwrap(), c.seed.wrapping_add(1));
            for (name, b) in [("training", &train), ("validation", &val), ("test", &test)] {
                if b.is_empty() {
                    return Err(Error::Data(format!("the {name} split has no baskets")));
                }
            }
            let labels = all.labels.clone();
            finish(Splits { train, val, test }, labels, None, None)
        }
        ExperimentKind::Temperature => {
            let rows = read_temperatures_csv(data_path(&c)?)?;
            let ranges = YearRanges {
                train: c.train_years.unwrap(),
                val: c.val_years.unwrap(),
                test: c.test_years.unwrap(),
            };
            let t = load_temperatures(&rows, ranges)?;
            let splits = t.splits(c.lag.unwrap_or(false))?;
            let labels = splits.train.labels.clone();
            finish(splits, labels, None, Some(t.coords()))
        }
    })
}

/// Builds the (untrained) model a resolved config describes.
pub fn build_model(c: &ExperimentConfig, data: &ExperimentData) -> Result<SavedModel> {
    let c = c.resolved();
    let head = c.head()?;
    let dim = c.dim.unwrap();
    if c.model == ModelFamily::Fm {
        let variant = match c.experiment {
            ExperimentKind::Synthetic => FmVariant::GaussianRatings,
            ExperimentKind::RatingsSeq | ExperimentKind::Baskets => FmVariant::Categorical,
            ExperimentKind::RatingsValues => match head {
                ExpFamHead::PoissonOnePlus => FmVariant::PoissonV2,
                _ => FmVariant::PoissonV1,
            },
            ExperimentKind::Temperature => FmVariant::GaussianKnn,
        };
        let attribute = (variant == FmVariant::GaussianKnn).then(|| AttributeEncoderConfig {
            tau_dim: 2,
            hidden: c.attribute_hidden.unwrap(),
            dim,
        });
        let config = FmConfig {
            variant,
            vocab: data.vocab,
            dim,
            direction: c.direction,
            attribute,
            knn: c.knn,
            variance: c.variance.unwrap(),
        };
        let mut fm = FmModel::new(config, c.seed.wrapping_add(1))?;
        if let (Some(k), Some(coords)) = (c.knn, &data.coords) {
            fm.set_neighbors(haversine_knn(coords, k).map_err(|e| Error::Config(e.to_string()))?)?;
        }
        return Ok(SavedModel::Fm(fm));
    }
    let shape = LayerShape {
        heads: c.heads.unwrap(),
        residual: true,
        ffn_width: c.ffn_width,
        layer_norm: c.layer_norm.unwrap(),
    };
    let layers = c.layers.unwrap();
    let readout_hidden = c.readout_hidden.clone().unwrap_or_default();
    let config = match c.experiment {
        ExperimentKind::Synthetic => {
            let mut cfg = synthetic_efa_config(
                dim,
                c.value_dim.unwrap(),
                shape,
                layers,
                readout_hidden,
                c.positional.unwrap(),
                c.direction,
            );
            if let Some(v) = cfg.value.as_mut() {
                v.head = head;
            }
            cfg
        }
        kind => {
            let example = match kind {
                ExperimentKind::RatingsValues => ExampleKind::MovieRatings,
                ExperimentKind::Temperature => ExampleKind::SpatioTemporalGaussian,
                _ => ExampleKind::Baskets,
            };
            let dims = ExampleDims {
                vocab: data.vocab,
                max_len: data.max_len,
                dim,
                value_dim: c.value_dim.unwrap(),
                layers,
                heads: shape.heads,
                residual: true,
                ffn_width: c.ffn_width,
                layer_norm: shape.layer_norm,
                readout_hidden,
                ordered: c.positional.unwrap_or(false),
                tau_dim: 2,
                attribute_hidden: c.attribute_hidden.unwrap_or(dim),
                head,
            };
            let mut cfg = instantiate_example(example, &dims, c.direction)?;
            if let Some(v) = cfg.value.as_mut() {
                if kind == ExperimentKind::Temperature {
                    v.input_projection = c.projection_hidden.map(|hidden| InputProjection { hidden, dim });
                    if c.lag == Some(true) {
                        v.segments = Some(SegmentConfig { count: 2, dim });
                    }
                } else {
                    v.positional = c.positional.unwrap();
                }
            }
            if let Some(cat) = cfg.categorical.as_mut() {
                cat.positional = c.positional.unwrap();
            }
            cfg.validate()?;
            cfg
        }
    };
    Ok(SavedModel::Efa(EfaModel::new(config, c.seed.wrapping_add(1))?))
}

fn metrics_for(kind: ExperimentKind) -> &'static [(&'static str, Metric)] {
    match kind {
        ExperimentKind::Synthetic | ExperimentKind::Temperature => &[("mse", Metric::Mse)],
        ExperimentKind::RatingsSeq | ExperimentKind::Baskets => &[("cross_entropy", Metric::CrossEntropy)],
        ExperimentKind::RatingsValues => &[
            ("poisson_nll", Metric::PoissonNll),
            ("mse", Metric::Mse),
            ("mean_by_actual", Metric::MeanByActual),
        ],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub vocab: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub sparsity: Option<f64>,
}

/// Contents of `metrics.json`: everything reported about a run except timing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub experiment: ExperimentKind,
    pub model: String,
    pub direction: Direction,
    pub seed: u64,
    pub data: DataSummary,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    /// `split/metric` keys, e.g. `test/mse`.
    pub metrics: BTreeMap<String, MetricValue>,
}

impl RunMetrics {
    pub fn scalar(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).and_then(MetricValue::scalar)
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub out: PathBuf,
    pub metrics: RunMetrics,
    pub report: FitReport,
    pub checkpoint: Checkpoint,
}

fn model_mut(m: &mut SavedModel) -> &mut dyn SequenceModel {
    match m {
        SavedModel::Efa(e) => e,
        SavedModel::Fm(f) => f,
    }
}

fn model_ref(m: &SavedModel) -> &dyn SequenceModel {
    match m {
        SavedModel::Efa(e) => e,
        SavedModel::Fm(f) => f,
    }
}

/// Loads data, fits, evaluates and writes `config.snapshot`, `metrics.json`,
/// `report.json`, `checkpoint.json` and `dumps/` into the output directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutcome> {
    config.validate()?;
    let c = config.resolved();
    let out = c.out.clone().ok_or_else(|| Error::Config("no output directory given".into()))?;
    let data = load_data(&c)?;
    let mut model = build_model(&c, &data)?;
    let splits = &data.splits;
    let report = fit(model_mut(&mut model), &splits.train, &splits.val, &c.fit_config())?;

    let mut metrics = BTreeMap::new();
    for (split, batch) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        for &(name, metric) in metrics_for(c.experiment) {
            metrics.insert(format!("{split}/{name}"), evaluate(model_ref(&model), batch, metric)?);
        }
    }
    if c.experiment == ExperimentKind::Synthetic {
        metrics.insert("test/oracle_mse".into(), MetricValue::Scalar(oracle_mse(&splits.test)));
    }
    let run = RunMetrics {
        experiment: c.experiment,
        model: c.model.label().into(),
        direction: c.direction,
        seed: c.seed,
        data: DataSummary {
            vocab: data.vocab,
            train: splits.train.len(),
            val: splits.val.len(),
            test: splits.test.len(),
            sparsity: data.sparsity,
        },
        epochs: report.train_losses.len(),
        best_epoch: report.best_epoch,
        best_val_loss: report.best_val_loss,
        stopped_early: report.stopped_early,
        metrics,
    };

    fs::create_dir_all(out.join("dumps"))?;
    fs::write(out.join("config.snapshot"), c.to_toml()?)?;
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&run)? + "\n")?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    let checkpoint = Checkpoint::new(model, data.labels.clone()).with_attributes(splits.train.attributes.clone());
    checkpoint.save(&out.join("checkpoint.json"))?;
    write_dumps(&out.join("dumps"), &checkpoint, &splits.test, c.dump_sequences.unwrap())?;
    Ok(RunOutcome {
        out,
        metrics: run,
        report,
        checkpoint,
    })
}

fn token_names(checkpoint: &Checkpoint) -> Vec<String> {
    checkpoint
        .labels
        .clone()
        .unwrap_or_else(|| (0..checkpoint.vocab()).map(|t| t.to_string()).collect())
}

fn dim_names(rows: usize) -> Vec<String> {
    (0..rows).map(|r| format!("dim{r}")).collect()
}

/// Writes one CSV per head (`…_head{h}.csv`) and the head average (`…_avg.csv`).
pub fn write_attention_dump(dir: &Path, stem: &str, dump: &AttentionDump, names: &[String]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (h, m) in dump.heads.iter().enumerate() {
        let p = dir.join(format!("{stem}_head{h}.csv"));
        write_matrix_csv(&p, "query", names, names, m)?;
        written.push(p);
    }
    let p = dir.join(format!("{stem}_avg.csv"));
    write_matrix_csv(&p, "query", names, names, &dump.average)?;
    written.push(p);
    Ok(written)
}

/// Writes `W^Q β`, `W^K β` and `W^V β` as `qkv_layer{l}_head{h}_{q,k,v}.csv`.
pub fn write_qkv_dump(dir: &Path, checkpoint: &Checkpoint, layer: usize, head: usize) -> Result<Vec<PathBuf>> {
    let model = checkpoint.efa()?;
    let mats = export_qkv_embeddings(model, layer, head, Component::Categorical)?;
    let names = token_names(checkpoint);
    let mut written = Vec::new();
    for (which, m) in ["q", "k", "v"].iter().zip(&mats) {
        let p = dir.join(format!("qkv_layer{layer}_head{head}_{which}.csv"));
        write_matrix_csv(&p, "dim", &dim_names(m.rows()), &names, m)?;
        written.push(p);
    }
    Ok(written)
}

/// Writes the top-`k` co-purchase list of every item as `copurchase.csv`.
pub fn write_copurchase_dump(dir: &Path, checkpoint: &Checkpoint, k: usize) -> Result<PathBuf> {
    let model = checkpoint.efa()?;
    let names = token_names(checkpoint);
    let p = dir.join("copurchase.csv");
    let mut w = csv::Writer::from_path(&p)?;
    w.write_record(["item", "rank", "other", "score"])?;
    for item in 0..model.config.vocab {
        for (rank, (other, score)) in top_copurchase(model, item, k)?.into_iter().enumerate() {
            w.write_record([names[item].clone(), (rank + 1).to_string(), names[other].clone(), score.to_string()])?;
        }
    }
    w.flush()?;
    Ok(p)
}

fn write_dumps(dir: &Path, checkpoint: &Checkpoint, test: &SequenceBatch, sequences: usize) -> Result<()> {
    let count = sequences.min(test.len());
    match &checkpoint.model {
        SavedModel::Fm(fm) => {
            for f in 0..count {
                let names = position_names(test, f);
                let u = uniform_context_weights(test.sequences[f].len(), fm.config.direction);
                write_matrix_csv(&dir.join(format!("uniform_seq{f}.csv")), "query", &names, &names, &u)?;
            }
        }
        SavedModel::Efa(m) => {
            let mut components = Vec::new();
            if let Some(cat) = &m.config.categorical {
                components.push((Component::Categorical, "categorical", cat.stack.layers.len()));
            }
            if let Some(v) = &m.config.value {
                components.push((Component::Value, "value", v.stack.layers.len()));
            }
            for f in 0..count {
                let names = position_names(test, f);
                for &(component, tag, layers) in &components {
                    for layer in 0..layers {
                        let dump = export_attention_weights(m, test, f, layer, component)?;
                        write_attention_dump(dir, &format!("attention_{tag}_seq{f}_layer{layer}"), &dump, &names)?;
                    }
                }
            }
            if let Some(cat) = &m.config.categorical {
                for head in 0..cat.stack.layers[0].heads {
                    write_qkv_dump(dir, checkpoint, 0, head)?;
                }
                if m.config.value.is_none() && m.config.vocab > 3 {
                    write_copurchase_dump(dir, checkpoint, 3)?;
                }
            }
        }
    }
    Ok(())
}

/// Identifiability evidence for bidirectional categorical models on
/// permutations of the synthetic movies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryProbeReport {
    pub seed: u64,
    pub dim: usize,
    pub vocab: usize,
    pub epochs: usize,
    /// A model against itself with a planted invertible map.
    pub planted: IdentifiabilityProbeReport,
    pub planted_map: Tensor,
    /// Two models trained from different seeds.
    pub trained: IdentifiabilityProbeReport,
    pub trained_val_losses: [f64; 2],
    pub diversity: DiversityReport,
    pub theta_norms: [f64; 2],
}

fn permutation_batch(users: usize, seed: u64) -> Result<SequenceBatch> {
    let ratings = crate::data::synthetic::generate_synthetic_ratings(users, seed)?;
    let mut b = SequenceBatch::new(MOVIES, ratings.sequences.into_iter().map(|s| Sequence::tokens(s.tokens)).collect())?;
    b.labels = ratings.labels;
    Ok(b)
}

/// Trains two `K`-dimensional models (K ≤ D − 1) from different seeds,
/// fits linear maps between their embeddings and reports residuals.
pub fn theory_probe(seed: u64, dim: usize, epochs: usize) -> Result<TheoryProbeReport> {
    if dim == 0 || dim >= MOVIES {
        return Err(Error::Config(format!("probe dimension must lie in 1..{MOVIES}")));
    }
    let config = EfaConfig {
        vocab: MOVIES,
        max_len: MOVIES,
        direction: Direction::Bidirectional,
        categorical: Some(CategoricalConfig {
            dim,
            positional: true,
            stack: StackConfig::new(vec![LayerShape::plain()], AttentionKind::Softmax),
        }),
        value: None,
    };
    let train = permutation_batch(400, seed)?;
    let val = permutation_batch(100, seed.wrapping_add(1))?;
    let probe = permutation_batch(12, seed.wrapping_add(2))?;
    let probes: Vec<(usize, usize)> = (0..probe.len()).flat_map(|f| (0..MOVIES).map(move |i| (f, i))).collect();
    let fit_config = FitConfig {
        learning_rate: 1e-2,
        max_epochs: epochs,
        patience: epochs.max(1),
        batch_size: Some(50),
        seed,
        ..FitConfig::default()
    };
    let mut models = Vec::new();
    let mut val_losses = [0.0; 2];
    for (k, s) in [seed.wrapping_add(10), seed.wrapping_add(20)].into_iter().enumerate() {
        let mut m = EfaModel::new(config.clone(), s)?;
        val_losses[k] = fit(&mut m, &train, &val, &fit_config)?.best_val_loss;
        models.push(m);
    }
    let planted_map = Tensor::from_fn(dim, dim, |r, c| if r == c { 2.0 } else { 0.25 * (r as f64 - c as f64) });
    let planted_model = plant_linear_map(&models[0], &planted_map)?;
    let planted = linear_identifiability_probe(&models[0], &planted_model, &probe, &probes)?;
    let trained = linear_identifiability_probe(&models[0], &models[1], &probe, &probes)?;
    let pairs: Vec<(usize, usize)> = (0..MOVIES).map(|x| (x, (x + 1) % MOVIES)).collect();
    let diversity = diversity_matrices(&models[0], &probe, &probes, &pairs)?;
    Ok(TheoryProbeReport {
        seed,
        dim,
        vocab: MOVIES,
        epochs,
        planted,
        planted_map,
        trained,
        trained_val_losses: val_losses,
        diversity,
        theta_norms: [theta_norm(&models[0])?, theta_norm(&models[1])?],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_synthetic(model: ModelFamily, direction: Direction, out: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(ExperimentKind::Synthetic, model, direction);
        c.train_users = Some(120);
        c.val_users = Some(40);
        c.test_users = Some(40);
        c.max_epochs = Some(2);
        c.dim = Some(4);
        c.value_dim = Some(4);
        c.readout_hidden = Some(vec![4]);
        c.out = Some(out.to_path_buf());
        c
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let text = "experiment = \"temperature\"\nmodel = \"fm\"\ndirection = \"bidirectional\"\ndata = \"t.csv\"\nknn = 3\ntrain_years = [2007, 2012]\n";
        let c = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(c.knn, Some(3));
        assert_eq!(c.train_years, Some((2007, 2012)));
        c.validate().unwrap();
        let r = c.resolved();
        assert_eq!(ExperimentConfig::from_toml(&r.to_toml().unwrap()).unwrap(), r);
        assert!(matches!(
            ExperimentConfig::from_toml(&format!("{text}colour = 1\n")),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn invalid_combinations_are_rejected() {
        use ExperimentKind::*;
        let base = |e, m, d| {
            let mut c = ExperimentConfig::new(e, m, d);
            if e != Synthetic {
                c.data = Some("x.csv".into());
            }
            c
        };
        let bi = Direction::Bidirectional;
        let uni = Direction::Unidirectional;
        let mut c = base(Temperature, ModelFamily::Efa, bi);
        c.positional = Some(true);
        assert!(c.validate().is_err());
        assert!(base(Temperature, ModelFamily::Efa, uni).validate().is_err());
        let mut c = base(Synthetic, ModelFamily::Efa, uni);
        c.head = Some(HeadChoice::Categorical);
        assert!(c.validate().is_err());
        let mut c = base(RatingsValues, ModelFamily::Fm, uni);
        c.head = Some(HeadChoice::Gaussian);
        assert!(c.validate().is_err());
        let mut c = base(Temperature, ModelFamily::Fm, bi);
        c.lag = Some(true);
        assert!(c.validate().is_err());
        let mut c = base(Baskets, ModelFamily::Efa, uni);
        c.knn = Some(2);
        assert!(c.validate().is_err());
        let mut c = base(Synthetic, ModelFamily::Efa, uni);
        c.data = Some("x.csv".into());
        assert!(c.validate().is_err());
        let mut c = base(Baskets, ModelFamily::Efa, uni);
        c.data = None;
        assert!(c.validate().is_err());
        let mut c = base(Synthetic, ModelFamily::Efa, uni);
        c.learning_rate = Some(0.0);
        assert!(c.validate().is_err());
        let mut c = base(Temperature, ModelFamily::Efa, bi);
        c.lag = Some(true);
        c.validate().unwrap();
        base(RatingsValues, ModelFamily::Efa, bi).validate().unwrap();
    }

    #[test]
    fn missing_data_is_a_path_error() {
        let mut c = ExperimentConfig::new(ExperimentKind::Baskets, ModelFamily::Fm, Direction::Unidirectional);
        c.data = Some("/nonexistent/baskets.csv".into());
        c.out = Some("/tmp/unused".into());
        assert!(matches!(run_experiment(&c), Err(Error::MissingPath { .. })));
    }

    #[test]
    fn synthetic_run_writes_artifacts_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        for (k, model) in [ModelFamily::Efa, ModelFamily::Fm].into_iter().enumerate() {
            let a = dir.path().join(format!("a{k}"));
            let b = dir.path().join(format!("b{k}"));
            let ra = run_experiment(&small_synthetic(model, Direction::Unidirectional, &a)).unwrap();
            run_experiment(&small_synthetic(model, Direction::Unidirectional, &b)).unwrap();
            assert_eq!(fs::read(a.join("metrics.json")).unwrap(), fs::read(b.join("metrics.json")).unwrap());
            assert!(ra.metrics.scalar("test/mse").unwrap().is_finite());
            for f in ["config.snapshot", "report.json", "checkpoint.json"] {
                assert!(a.join(f).exists(), "{f}");
            }
            let back = Checkpoint::load(&a.join("checkpoint.json")).unwrap();
            assert_eq!(back, ra.checkpoint);
            let dumps: Vec<_> = fs::read_dir(a.join("dumps")).unwrap().collect();
            assert!(!dumps.is_empty());
        }
    }

    #[test]
    fn probe_report_is_deterministic() {
        let a = theory_probe(5, 3, 3).unwrap();
        let b = theory_probe(5, 3, 3).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.planted.context_residual.unwrap() < 1e-6);
        assert!(a.trained.context_residual.is_some());
        assert!(theory_probe(0, 5, 1).is_err());
    }
}
