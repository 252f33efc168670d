//! Round-based client/server engine: local training, selective parameter
//! upload, strategy-dependent aggregation and broadcast.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::config::{
    AblationFlags, DataConfig, ExperimentConfig, StrategyName, WeightMode,
};
use crate::data::{self, DataError, Dataset, IdxError};
use crate::eval::{self, DecisionRule, EvalError, EvalResult};
use crate::losses::{self, LossBreakdown, LossError, ObjectiveKind, Schedules};
use crate::model::{sgd_step, Model, ModelError, ParamSet, PartitionTag};
use crate::ndtensor::{Graph, Mode, TensorError};
use crate::specfun::{RngStream, StreamPurpose};

#[derive(Debug, Error)]
pub enum FedError {
    #[error("shared parameter set does not match the strategy: {0}")]
    TagMismatch(String),
    #[error("aggregation weights invalid: {0}")]
    InvalidWeights(String),
    #[error("client updates disagree: {0}")]
    UpdateMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Idx(#[from] IdxError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid experiment: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FedError + '_ {
    move |source| FedError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Federation strategy. The ablation flags select the trfeddis training
/// objective variant; baselines train a single softmax head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    SingleSet,
    FedAvg,
    FedBn,
    TrFedDis(AblationFlags),
}

impl Strategy {
    pub fn from_config(name: StrategyName, flags: AblationFlags) -> Strategy {
        match name {
            StrategyName::SingleSet => Strategy::SingleSet,
            StrategyName::FedAvg => Strategy::FedAvg,
            StrategyName::FedBn => Strategy::FedBn,
            StrategyName::TrFedDis => Strategy::TrFedDis(flags),
        }
    }

    /// Partition tags uploaded to and broadcast from the server. The local
    /// head is private under every strategy; FedAvg additionally averages
    /// batch-normalization state, FedBN and trfeddis keep it local.
    pub fn aggregated_tags(&self) -> &'static [PartitionTag] {
        match self {
            Strategy::SingleSet => &[],
            Strategy::FedAvg => &[
                PartitionTag::SharedEncoder,
                PartitionTag::SharedGlobalHead,
                PartitionTag::LocalBn,
            ],
            Strategy::FedBn | Strategy::TrFedDis(_) => &[
                PartitionTag::SharedEncoder,
                PartitionTag::SharedGlobalHead,
            ],
        }
    }

    pub fn objective_kind(&self) -> ObjectiveKind {
        match self {
            Strategy::SingleSet | Strategy::FedAvg | Strategy::FedBn => {
                ObjectiveKind::SingleHeadCe
            }
            Strategy::TrFedDis(flags) => {
                if flags.un {
                    ObjectiveKind::Evidential {
                        ce: flags.ce,
                        dis: flags.dis,
                    }
                } else {
                    ObjectiveKind::SummedLogitsCe { dis: flags.dis }
                }
            }
        }
    }

    pub fn decision_rule(&self) -> DecisionRule {
        match self {
            Strategy::SingleSet | Strategy::FedAvg | Strategy::FedBn => {
                DecisionRule::GlobalSoftmax
            }
            Strategy::TrFedDis(flags) => {
                if flags.un {
                    DecisionRule::FusedOpinion
                } else {
                    DecisionRule::SummedLogits
                }
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::SingleSet => "singleset",
            Strategy::FedAvg => "fedavg",
            Strategy::FedBn => "fedbn",
            Strategy::TrFedDis(_) => "trfeddis",
        }
    }
}

/// Hyperparameters shared by every client in a run.
#[derive(Debug, Clone)]
pub struct Hyper {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedules: Schedules,
    pub objective: ObjectiveKind,
    pub decision_rule: DecisionRule,
    pub un_branch_weights: [f64; 3],
    pub expected_tags: Vec<PartitionTag>,
    pub parallel: bool,
}

/// Shared-tagged parameters a client sends after local training.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ParamSet<f32>,
    pub num_samples: usize,
}

/// One client's full state: model, data handle, shuffle stream and the
/// optimization step counter driving the anneal schedules. Plain SGD keeps
/// no optimizer state.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub model: Model<f32>,
    pub dataset: Arc<Dataset>,
    pub shuffle_rng: RngStream,
    pub step: u64,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub shared: ParamSet<f32>,
    pub round: usize,
    pub strategy: Strategy,
    pub weights: Vec<f64>,
}

/// Per-round, per-client record.
#[derive(Debug, Clone)]
pub struct ClientRoundReport {
    pub client: usize,
    pub train: LossBreakdown,
    pub eval: EvalResult,
}

#[derive(Debug, Clone)]
pub struct RoundReport {
    pub round: usize,
    pub clients: Vec<ClientRoundReport>,
}

/// One local-training pass: load the broadcast shared parameters, run E
/// epochs of plain SGD on the strategy objective, return the new
/// shared-tagged parameters and the mean loss breakdown.
pub fn local_train(
    client: &mut ClientState,
    shared: Option<&ParamSet<f32>>,
    hp: &Hyper,
) -> Result<(ClientUpdate, LossBreakdown), FedError> {
    if let Some(shared) = shared {
        let own = client.model.partition_view(&hp.expected_tags);
        let own_names: Vec<&str> = own.params.iter().map(|p| p.name.as_str()).collect();
        let got_names: Vec<&str> = shared.params.iter().map(|p| p.name.as_str()).collect();
        if own_names != got_names {
            return Err(FedError::TagMismatch(format!(
                "expected parameters {own_names:?}, got {got_names:?}"
            )));
        }
        client.model.load(shared)?;
    }

    let mut total = LossBreakdown::default();
    let mut steps = 0usize;
    let k = client.model.config.num_classes;
    for _ in 0..hp.epochs {
        let split = client.dataset.train();
        let batches: Vec<_> =
            data::train_batches(split, hp.batch_size, &mut client.shuffle_rng).collect();
        for (x, labels) in batches {
            let y = crate::ndtensor::Tensor::<f32>::one_hot(&labels, k);
            let mut g = Graph::new();
            let bound = client.model.bind(&mut g, true);
            let xv = g.constant(x);
            let (_, raw_g, raw_l) = client.model.forward(&mut g, &bound, xv, Mode::Train)?;
            let lambda_u = hp.schedules.lambda_u.value(client.step);
            let lambda_d = hp.schedules.lambda_d.value(client.step);
            let (loss, bd) = losses::objective(
                &mut g,
                raw_g,
                raw_l,
                &y,
                lambda_u,
                lambda_d,
                hp.objective,
                hp.un_branch_weights,
            )?;
            g.backward(loss)?;
            sgd_step(&mut client.model, &g, &bound, hp.lr);
            client.step += 1;
            total.add_assign(&bd);
            steps += 1;
        }
    }
    let mean = if steps > 0 {
        total.scaled(1.0 / steps as f64)
    } else {
        LossBreakdown::default()
    };
    Ok((
        ClientUpdate {
            client_id: client.id,
            params: client.model.partition_view(&hp.expected_tags),
            num_samples: client.dataset.n_train,
        },
        mean,
    ))
}

/// Weighted per-parameter average in fixed client order. Accumulates in
/// f64; a single client with weight 1 reproduces its update bitwise.
pub fn aggregate(updates: &[ClientUpdate], weights: &[f64]) -> Result<ParamSet<f32>, FedError> {
    if updates.is_empty() {
        return Err(FedError::UpdateMismatch("no updates".into()));
    }
    if updates.len() != weights.len() {
        return Err(FedError::InvalidWeights(format!(
            "{} updates, {} weights",
            updates.len(),
            weights.len()
        )));
    }
    let wsum: f64 = weights.iter().sum();
    if (wsum - 1.0).abs() > 1e-6 {
        return Err(FedError::InvalidWeights(format!("weights sum to {wsum}")));
    }
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].client_id);

    let first = &updates[order[0]].params;
    for &i in &order[1..] {
        let u = &updates[i].params;
        if u.len() != first.len() {
            return Err(FedError::UpdateMismatch(format!(
                "client {} sent {} parameters, expected {}",
                updates[i].client_id,
                u.len(),
                first.len()
            )));
        }
        for (a, b) in first.params.iter().zip(u.params.iter()) {
            if a.name != b.name || a.value.shape != b.value.shape {
                return Err(FedError::UpdateMismatch(format!(
                    "parameter {} differs in name or shape from {}",
                    b.name, a.name
                )));
            }
        }
    }

    let mut out = first.clone();
    for (pi, p) in out.params.iter_mut().enumerate() {
        let mut acc = vec![0.0f64; p.value.numel()];
        for &i in &order {
            let w = weights[i];
            let src = &updates[i].params.params[pi].value.data;
            for (a, v) in acc.iter_mut().zip(src) {
                *a += w * (*v as f64);
            }
        }
        for (dst, a) in p.value.data.iter_mut().zip(acc) {
            *dst = a as f32;
        }
    }
    Ok(out)
}

/// One round: broadcast, parallel local training, aggregation, rebroadcast,
/// evaluation of each client on its own test split. The single-set strategy
/// skips every server interaction.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    hp: &Hyper,
) -> Result<RoundReport, FedError> {
    let collaborative = server.strategy != Strategy::SingleSet;
    let shared = if collaborative {
        Some(server.shared.clone())
    } else {
        None
    };

    let results: Vec<Result<(ClientUpdate, LossBreakdown), FedError>> = if hp.parallel {
        clients
            .par_iter_mut()
            .map(|c| local_train(c, shared.as_ref(), hp))
            .collect()
    } else {
        clients
            .iter_mut()
            .map(|c| local_train(c, shared.as_ref(), hp))
            .collect()
    };
    let mut updates = Vec::with_capacity(clients.len());
    let mut train_bds = Vec::with_capacity(clients.len());
    for r in results {
        let (u, bd) = r?;
        updates.push(u);
        train_bds.push(bd);
    }

    if collaborative {
        server.shared = aggregate(&updates, &server.weights)?;
        for c in clients.iter_mut() {
            c.model.load(&server.shared)?;
        }
    }
    server.round += 1;

    let evals: Vec<Result<EvalResult, FedError>> = if hp.parallel {
        clients
            .par_iter_mut()
            .map(|c| {
                eval::evaluate(&mut c.model, c.dataset.test(), hp.decision_rule, hp.batch_size)
                    .map_err(FedError::from)
            })
            .collect()
    } else {
        clients
            .iter_mut()
            .map(|c| {
                eval::evaluate(&mut c.model, c.dataset.test(), hp.decision_rule, hp.batch_size)
                    .map_err(FedError::from)
            })
            .collect()
    };

    let mut reports = Vec::with_capacity(clients.len());
    for ((c, bd), ev) in clients.iter().zip(train_bds).zip(evals) {
        reports.push(ClientRoundReport {
            client: c.id,
            train: bd,
            eval: ev?,
        });
    }
    Ok(RoundReport {
        round: server.round,
        clients: reports,
    })
}

/// Everything produced by one seed of an experiment.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub reports: Vec<RoundReport>,
    pub final_models: Vec<Model<f32>>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub strategy: Strategy,
    pub datasets: Vec<Arc<Dataset>>,
    pub seeds: Vec<SeedRun>,
}

impl ExperimentOutput {
    /// Mean over clients of the final-round decision accuracy, per seed.
    pub fn final_accuracies(&self) -> Vec<f64> {
        self.seeds
            .iter()
            .map(|s| {
                let last = s.reports.last().expect("at least one round");
                last.clients.iter().map(|c| c.eval.acc_fused).sum::<f64>()
                    / last.clients.len() as f64
            })
            .collect()
    }

    pub fn mean_final_accuracy(&self) -> f64 {
        let accs = self.final_accuracies();
        accs.iter().sum::<f64>() / accs.len() as f64
    }
}

/// Build the per-client datasets from the data config.
pub fn build_datasets(cfg: &ExperimentConfig) -> Result<Vec<Arc<Dataset>>, FedError> {
    match &cfg.data {
        DataConfig::Synthetic(s) => {
            let specs = match &s.domain_specs {
                Some(specs) => specs.clone(),
                None => (0..s.num_domains)
                    .map(|d| data::DomainSpec::default_for(d, 1))
                    .collect(),
            };
            Ok(data::make_synthetic(
                s.seed,
                &specs,
                s.per_domain_train,
                s.per_domain_test,
                cfg.model.num_classes,
                s.image_size,
            )?
            .into_iter()
            .map(Arc::new)
            .collect())
        }
        DataConfig::Idx { clients } => {
            let mut out = Vec::with_capacity(clients.len());
            for c in clients {
                let train_x = data::read_idx(&c.train_images)?;
                let train_y = data::read_idx_labels(&c.train_labels)?;
                let test_x = data::read_idx(&c.test_images)?;
                let test_y = data::read_idx_labels(&c.test_labels)?;
                if train_x.shape[0] != train_y.len() || test_x.shape[0] != test_y.len() {
                    return Err(FedError::Invalid(
                        "images/labels length mismatch in idx data".into(),
                    ));
                }
                if train_x.shape[1..] != test_x.shape[1..] {
                    return Err(FedError::Invalid(
                        "train/test image shapes differ in idx data".into(),
                    ));
                }
                // canonical sample layout [N, C, H, W]
                let reshape = |t: crate::ndtensor::Tensor<f32>| {
                    let mut shape = t.shape.clone();
                    if shape.len() == 3 {
                        shape = vec![shape[0], 1, shape[1], shape[2]];
                    }
                    crate::ndtensor::Tensor {
                        shape,
                        data: t.data,
                    }
                };
                let train_x = reshape(train_x);
                let test_x = reshape(test_x);
                let n_train = train_x.shape[0];
                let mut shape = train_x.shape.clone();
                shape[0] += test_x.shape[0];
                let mut inputs = train_x.data;
                inputs.extend_from_slice(&test_x.data);
                let mut labels = train_y;
                labels.extend_from_slice(&test_y);
                out.push(Arc::new(Dataset {
                    inputs: crate::ndtensor::Tensor {
                        shape,
                        data: inputs,
                    },
                    labels,
                    n_train,
                }));
            }
            Ok(out)
        }
    }
}

/// Build the per-run hyperparameters from a validated config.
pub fn build_hyper(cfg: &ExperimentConfig, strategy: Strategy, n_train: usize) -> Hyper {
    let steps_per_epoch = n_train / cfg.batch_size;
    Hyper {
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        epochs: cfg.local_epochs,
        schedules: cfg.schedules(steps_per_epoch),
        objective: strategy.objective_kind(),
        decision_rule: strategy.decision_rule(),
        un_branch_weights: cfg.un_branch_weights,
        expected_tags: strategy.aggregated_tags().to_vec(),
        parallel: cfg.parallel,
    }
}

/// Seed one trial: per-client models and streams, server holding client 0's
/// shared view.
pub fn init_trial(
    cfg: &ExperimentConfig,
    strategy: Strategy,
    datasets: &[Arc<Dataset>],
    seed: u64,
) -> Result<(ServerState, Vec<ClientState>), FedError> {
    let mut clients = Vec::with_capacity(datasets.len());
    for (i, ds) in datasets.iter().enumerate() {
        let mut init_rng = RngStream::derive(seed, StreamPurpose::ModelInit, i as u64);
        let model = Model::init(cfg.model.clone(), &mut init_rng)?;
        clients.push(ClientState {
            id: i,
            model,
            dataset: Arc::clone(ds),
            shuffle_rng: RngStream::derive(seed, StreamPurpose::Shuffle, i as u64),
            step: 0,
        });
    }
    let weights: Vec<f64> = match cfg.aggregation {
        WeightMode::Uniform => vec![1.0 / datasets.len() as f64; datasets.len()],
        WeightMode::Samples => {
            let total: usize = datasets.iter().map(|d| d.n_train).sum();
            datasets
                .iter()
                .map(|d| d.n_train as f64 / total as f64)
                .collect()
        }
    };
    let server = ServerState {
        shared: clients[0].model.partition_view(strategy.aggregated_tags()),
        round: 0,
        strategy,
        weights,
    };
    Ok((server, clients))
}

/// Run the full multi-seed experiment described by a config, persisting
/// metrics, summary and checkpoints when an output directory is set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, FedError> {
    cfg.validate().map_err(|e| FedError::Invalid(e.to_string()))?;
    let strategy = Strategy::from_config(cfg.strategy, cfg.ablation);
    let datasets = build_datasets(cfg)?;
    let hp = build_hyper(cfg, strategy, datasets[0].n_train);

    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let (mut server, mut clients) = init_trial(cfg, strategy, &datasets, seed)?;
        let mut reports = Vec::with_capacity(cfg.rounds);
        for _ in 0..cfg.rounds {
            reports.push(run_round(&mut server, &mut clients, &hp)?);
        }
        seeds.push(SeedRun {
            seed,
            reports,
            final_models: clients.into_iter().map(|c| c.model).collect(),
        });
    }
    let output = ExperimentOutput {
        strategy,
        datasets,
        seeds,
    };
    if let Some(dir) = &cfg.out_dir {
        persist(cfg, &output, dir)?;
    }
    Ok(output)
}

/// Write metrics.csv, summary.csv, the resolved config and per-seed
/// per-client checkpoints under `dir`.
pub fn persist(
    cfg: &ExperimentConfig,
    output: &ExperimentOutput,
    dir: &Path,
) -> Result<(), FedError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;

    let cfg_path = dir.join("config.json");
    let text = serde_json::to_string_pretty(cfg).expect("config serializes");
    std::fs::write(&cfg_path, text).map_err(io_err(&cfg_path))?;

    let metrics_path = dir.join("metrics.csv");
    let mut csv = String::new();
    csv.push_str(eval::METRICS_HEADER);
    csv.push('\n');
    for run in &output.seeds {
        for report in &run.reports {
            for c in &report.clients {
                csv.push_str(&eval::metrics_train_row(
                    run.seed,
                    report.round,
                    c.client,
                    &c.train,
                ));
                csv.push('\n');
            }
            for c in &report.clients {
                csv.push_str(&eval::metrics_test_row(
                    run.seed,
                    report.round,
                    c.client,
                    &c.eval,
                ));
                csv.push('\n');
            }
        }
    }
    std::fs::write(&metrics_path, csv).map_err(io_err(&metrics_path))?;

    let summary_path = dir.join("summary.csv");
    std::fs::write(&summary_path, summary_csv(output)).map_err(io_err(&summary_path))?;

    for run in &output.seeds {
        let seed_dir = dir.join("checkpoints").join(format!("seed{}", run.seed));
        std::fs::create_dir_all(&seed_dir).map_err(io_err(&seed_dir))?;
        for (i, model) in run.final_models.iter().enumerate() {
            let path = seed_dir.join(format!("client{i}.ckpt"));
            checkpoint::checkpoint_write(model, &path)?;
        }
    }
    Ok(())
}

/// Mean/std across seeds of the final-round client-mean metrics.
pub fn summary_csv(output: &ExperimentOutput) -> String {
    let per_seed = |f: &dyn Fn(&EvalResult) -> f64| -> Vec<f64> {
        output
            .seeds
            .iter()
            .filter_map(|s| s.reports.last())
            .map(|r| r.clients.iter().map(|c| f(&c.eval)).sum::<f64>() / r.clients.len() as f64)
            .collect()
    };
    let stats = |xs: &[f64]| -> (f64, f64) {
        if xs.is_empty() {
            return (f64::NAN, f64::NAN);
        }
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
        (m, v.sqrt())
    };
    let mut out = String::from("metric,mean,std\n");
    for (name, f) in [
        ("acc_fused", &(|e: &EvalResult| e.acc_fused) as &dyn Fn(&EvalResult) -> f64),
        ("acc_global", &|e: &EvalResult| e.acc_global),
        ("acc_local", &|e: &EvalResult| e.acc_local),
        ("mean_u", &|e: &EvalResult| e.mean_uncertainty),
    ] {
        let (m, s) = stats(&per_seed(f));
        out.push_str(&format!("{name},{m},{s}\n"));
    }
    out
}
