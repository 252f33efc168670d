//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line. Run with `cargo test --test acceptance -- --nocapture`.
//!
//! The desk-scale federated runs (criteria 6-8) are computed once and
//! shared across tests.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use trfeddis::cli::variant_config;
use trfeddis::config::{
    AblationFlags, DataConfig, ExperimentConfig, ScheduleConfig, StrategyName,
    SyntheticDataConfig, WeightMode,
};
use trfeddis::data::corrupt_gaussian;
use trfeddis::eval::{fused_uncertainties, ood_separation};
use trfeddis::evidential::{
    ds_fuse, opinion_to_dirichlet, predict, to_evidence, to_opinion, EvidenceBatch, Opinion,
};
use trfeddis::federation::{
    self, aggregate, local_train, run_experiment, run_round, ClientState, ExperimentOutput,
    Strategy,
};
use trfeddis::losses::{
    cross_entropy_node, dce_loss, dce_node, disentangle_loss, disentangle_node, kl_regularizer,
    kl_regularizer_node, objective, uncertainty_loss_node, LossError, ObjectiveKind,
};
use trfeddis::model::{EncoderBlock, Model, ModelConfig, PartitionTag};
use trfeddis::ndtensor::{grad_check_multi, Graph, Mode, Tensor, TensorError};
use trfeddis::specfun::{digamma, lgamma, trigamma, RngStream, StreamPurpose};

fn pass(criterion: u32, detail: &str) {
    println!("ACCEPTANCE criterion {criterion}: PASS ({detail})");
}

fn rand_tensor(shape: &[usize], rng: &mut RngStream, lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.uniform_range(lo, hi)).collect()).unwrap()
}

fn random_opinion(k: usize, rng: &mut RngStream) -> Opinion<f64> {
    let e: Vec<f64> = (0..k).map(|_| rng.uniform_range(0.0, 12.0)).collect();
    let (_, op) = to_opinion(&EvidenceBatch {
        e: Tensor::from_vec(&[1, k], e).unwrap(),
    });
    op
}

// ---- criteria 1-5: algebra, gradients, special functions, anchors ----

#[test]
fn criterion_01_evidential_algebra_suite() {
    let start = Instant::now();
    let mut rng = RngStream::derive(2024, StreamPurpose::Test, 1);
    for &k in &[2usize, 3, 10] {
        for _ in 0..10_000 {
            let e: Vec<f64> = (0..k).map(|_| rng.uniform_range(0.0, 15.0)).collect();
            let (_, op) = to_opinion(&EvidenceBatch {
                e: Tensor::from_vec(&[1, k], e.clone()).unwrap(),
            });
            let total: f64 = op.belief.data.iter().sum::<f64>() + op.uncertainty[0];
            assert!((total - 1.0).abs() < 1e-9, "opinion closure violated");

            let other = random_opinion(k, &mut rng);
            let (fused, _) = ds_fuse(&op, &other).unwrap();
            let total: f64 = fused.belief.data.iter().sum::<f64>() + fused.uncertainty[0];
            assert!((total - 1.0).abs() < 1e-9, "fused closure violated");

            // vacuous identity
            let vac = Opinion::vacuous(1, k);
            let (idem, _) = ds_fuse(&op, &vac).unwrap();
            for (a, b) in idem.belief.data.iter().zip(&op.belief.data) {
                assert!((a - b).abs() < 1e-12, "vacuous identity violated");
            }
            assert!((idem.uncertainty[0] - op.uncertainty[0]).abs() < 1e-12);

            // commutativity
            let (ab, _) = ds_fuse(&op, &other).unwrap();
            let (ba, _) = ds_fuse(&other, &op).unwrap();
            for (a, b) in ab.belief.data.iter().zip(&ba.belief.data) {
                assert!((a - b).abs() < 1e-12, "commutativity violated");
            }
            let _ = fused;
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    pass(1, &format!("3x10^4 batches in {elapsed:.2?}"));
}

#[test]
fn criterion_02_fusion_value_check() {
    let g = Opinion {
        belief: Tensor::from_vec(&[1, 2], vec![0.8, 0.0]).unwrap(),
        uncertainty: vec![0.2],
    };
    let l = Opinion {
        belief: Tensor::from_vec(&[1, 2], vec![0.0, 0.8]).unwrap(),
        uncertainty: vec![0.2],
    };
    let (fused, diag) = ds_fuse(&g, &l).unwrap();
    assert!((diag.conflict[0] - 0.64).abs() < 1e-4);
    assert!((fused.belief.data[0] - 0.4444).abs() < 1e-4);
    assert!((fused.belief.data[1] - 0.4444).abs() < 1e-4);
    assert!((fused.uncertainty[0] - 0.1111).abs() < 1e-4);
    pass(
        2,
        &format!(
            "C={} b=({}, {}) u={}",
            diag.conflict[0], fused.belief.data[0], fused.belief.data[1], fused.uncertainty[0]
        ),
    );
}

#[test]
fn criterion_03_gradient_suite() {
    let start = Instant::now();
    let mut rng = RngStream::derive(2024, StreamPurpose::Test, 3);
    let (b, k) = (3, 3);
    let mut worst: (f64, &'static str) = (0.0, "none");
    let mut check = |name: &'static str, err: f64| {
        assert!(err < 1e-4, "{name} gradient error {err}");
        if err > worst.0 {
            worst = (err, name);
        }
    };

    for _ in 0..10 {
        let labels: Vec<u32> = (0..b).map(|_| rng.bounded(k as u64) as u32).collect();
        let y = Tensor::<f64>::one_hot(&labels, k);
        let alpha = rand_tensor(&[b, k], &mut rng, 1.05, 7.0);
        let raw_a = rand_tensor(&[b, k], &mut rng, -2.0, 2.0);
        let raw_b = rand_tensor(&[b, k], &mut rng, -2.0, 2.0);

        // Eq. 10 cross entropy (through softmax)
        let yc = y.clone();
        check(
            "cross_entropy",
            grad_check_multi(
                &mut |g, v| {
                    let yv = g.constant(yc.clone());
                    let p = g.softmax(v[0])?;
                    cross_entropy_node(g, p, yv)
                },
                std::slice::from_ref(&raw_a),
                1e-5,
            )
            .unwrap(),
        );
        // Eq. 11 evidential cross entropy
        let yc = y.clone();
        check(
            "dce",
            grad_check_multi(
                &mut |g, v| {
                    let yv = g.constant(yc.clone());
                    dce_node(g, v[0], yv)
                },
                std::slice::from_ref(&alpha),
                1e-5,
            )
            .unwrap(),
        );
        // Eq. 12 KL regularizer
        let yc = y.clone();
        check(
            "kl_regularizer",
            grad_check_multi(
                &mut |g, v| {
                    let yv = g.constant(yc.clone());
                    kl_regularizer_node(g, v[0], yv)
                },
                std::slice::from_ref(&alpha),
                1e-5,
            )
            .unwrap(),
        );
        // Eq. 13 balanced uncertainty loss
        let yc = y.clone();
        check(
            "uncertainty_loss",
            grad_check_multi(
                &mut |g, v| {
                    let yv = g.constant(yc.clone());
                    uncertainty_loss_node(g, v[0], yv, 0.7)
                },
                std::slice::from_ref(&alpha),
                1e-5,
            )
            .unwrap(),
        );
        // Eqs. 2-3 disentangling penalty
        check(
            "disentangle",
            grad_check_multi(
                &mut |g, v| disentangle_node(g, v[0], v[1]),
                &[raw_a.clone(), raw_b.clone()],
                1e-5,
            )
            .unwrap(),
        );
        // Eq. 14 composite
        let yc = y.clone();
        check(
            "composite",
            grad_check_multi(
                &mut |g, v| {
                    let (total, _) = objective(
                        g,
                        v[0],
                        v[1],
                        &yc,
                        0.6,
                        0.4,
                        ObjectiveKind::Evidential { ce: true, dis: true },
                        [1.0, 1.0, 1.0],
                    )
                    .map_err(|e| match e {
                        LossError::Tensor(t) => t,
                        other => panic!("unexpected {other}"),
                    })?;
                    Ok(total)
                },
                &[raw_a.clone(), raw_b.clone()],
                1e-4,
            )
            .unwrap(),
        );

        // tensor ops
        let xp = rand_tensor(&[3, 4], &mut rng, 0.3, 2.5);
        let yp = rand_tensor(&[3, 4], &mut rng, 0.4, 2.0);
        type Builder = fn(&mut Graph<f64>, &[trfeddis::ndtensor::Var]) -> Result<trfeddis::ndtensor::Var, TensorError>;
        let unary_cases: &[(&'static str, Builder)] = &[
            ("op_add", |g, v| {
                let a = g.add(v[0], v[1])?;
                Ok(g.mean(a))
            }),
            ("op_sub", |g, v| {
                let a = g.sub(v[0], v[1])?;
                Ok(g.mean(a))
            }),
            ("op_mul", |g, v| {
                let a = g.mul(v[0], v[1])?;
                Ok(g.mean(a))
            }),
            ("op_div", |g, v| {
                let a = g.div(v[0], v[1])?;
                Ok(g.mean(a))
            }),
            ("op_relu", |g, v| {
                let a = g.relu(v[0]);
                Ok(g.sum(a))
            }),
            ("op_softplus", |g, v| {
                let a = g.softplus(v[0]);
                Ok(g.sum(a))
            }),
            ("op_exp", |g, v| {
                let a = g.exp(v[0]);
                Ok(g.mean(a))
            }),
            ("op_log", |g, v| {
                let a = g.log(v[0])?;
                Ok(g.mean(a))
            }),
            ("op_log_clamped", |g, v| {
                let a = g.log_clamped(v[0], 1e-12);
                Ok(g.mean(a))
            }),
            ("op_digamma", |g, v| {
                let a = g.digamma(v[0])?;
                Ok(g.mean(a))
            }),
            ("op_lgamma", |g, v| {
                let a = g.lgamma(v[0])?;
                Ok(g.mean(a))
            }),
            ("op_softmax", |g, v| {
                let a = g.softmax(v[0])?;
                let sq = g.mul(a, a)?;
                Ok(g.sum(sq))
            }),
            ("op_row_sum", |g, v| {
                let a = g.row_sum(v[0])?;
                let sq = g.mul(a, a)?;
                Ok(g.mean(sq))
            }),
            ("op_scale_add_const", |g, v| {
                let a = g.scale(v[0], 1.3);
                let b = g.add_const(a, -0.2);
                let sq = g.mul(b, b)?;
                Ok(g.mean(sq))
            }),
            ("op_reshape", |g, v| {
                let r = g.reshape(v[0], &[4, 3])?;
                let sq = g.mul(r, r)?;
                Ok(g.sum(sq))
            }),
        ];
        for (name, f) in unary_cases {
            let mut ff = *f;
            check(
                name,
                grad_check_multi(&mut ff, &[xp.clone(), yp.clone()], 1e-5).unwrap(),
            );
        }

        // dense / conv / pool / batchnorm
        let x = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
        let w = rand_tensor(&[4, 2], &mut rng, -1.0, 1.0);
        let bias = rand_tensor(&[2], &mut rng, -0.5, 0.5);
        check(
            "op_dense",
            grad_check_multi(
                &mut |g, v| {
                    let d = g.dense(v[0], v[1], v[2])?;
                    let s = g.softplus(d);
                    Ok(g.mean(s))
                },
                &[x, w, bias],
                1e-5,
            )
            .unwrap(),
        );
        let cx = rand_tensor(&[2, 2, 4, 4], &mut rng, -1.0, 1.0);
        let ck = rand_tensor(&[2, 2, 3, 3], &mut rng, -0.6, 0.6);
        let cb = rand_tensor(&[2], &mut rng, -0.2, 0.2);
        check(
            "op_conv2d_maxpool",
            grad_check_multi(
                &mut |g, v| {
                    let c = g.conv2d(v[0], v[1], v[2], 1, 1)?;
                    let p = g.maxpool2(c)?;
                    let sq = g.mul(p, p)?;
                    Ok(g.mean(sq))
                },
                &[cx, ck, cb],
                1e-5,
            )
            .unwrap(),
        );
        let bx = rand_tensor(&[5, 3], &mut rng, -2.0, 2.0);
        let bg = rand_tensor(&[3], &mut rng, 0.5, 1.5);
        let bb = rand_tensor(&[3], &mut rng, -0.5, 0.5);
        check(
            "op_batchnorm",
            grad_check_multi(
                &mut |g, v| {
                    let rm = Tensor::zeros(&[3]);
                    let rv = Tensor::filled(&[3], 1.0);
                    let (y, _) = g.batchnorm(v[0], v[1], v[2], &rm, &rv, Mode::Train)?;
                    let sq = g.mul(y, y)?;
                    Ok(g.mean(sq))
                },
                &[bx, bg, bb],
                1e-4,
            )
            .unwrap(),
        );
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    pass(
        3,
        &format!("worst {} = {:.2e}, {:.2?}", worst.1, worst.0, elapsed),
    );
}

#[test]
fn criterion_04_special_functions() {
    assert!((digamma(1.0) - (-0.577_215_664_901_532_9)).abs() < 1e-10);
    assert!((trigamma(1.0) - 1.644_934_066_848_226_4).abs() < 1e-10);
    assert!((lgamma(0.5) - 0.572_364_942_924_700_1).abs() < 1e-10);
    let mut rng = RngStream::derive(2024, StreamPurpose::Test, 4);
    for _ in 0..10_000 {
        let x = rng.uniform_range(0.01, 100.0);
        let lg = lgamma(x + 1.0) - lgamma(x) - x.ln();
        let scale = lgamma(x + 1.0).abs().max(1.0);
        assert!(lg.abs() <= 1e-12 * scale, "lgamma recurrence at {x}");
        let dg = digamma(x + 1.0) - digamma(x) - 1.0 / x;
        let scale = digamma(x + 1.0).abs().max(1.0 / x).max(1.0);
        assert!(dg.abs() <= 1e-12 * scale, "digamma recurrence at {x}");
    }
    pass(4, "digamma/trigamma/lgamma anchors and 10^4-point recurrences");
}

#[test]
fn criterion_05_closed_form_loss_anchors() {
    // dce(alpha=(3,2,1), y=class 0) = 1/3 + 1/4 + 1/5
    let alpha = Tensor::from_vec(&[1, 3], vec![3.0, 2.0, 1.0]).unwrap();
    let strength = vec![6.0];
    let d = trfeddis::evidential::DirichletBatch { alpha, strength };
    let y = Tensor::<f64>::one_hot(&[0], 3);
    let got = dce_loss(&d, &y).unwrap();
    assert!((got - 0.7833333333333333).abs() < 1e-6, "dce anchor {got}");

    // kl = 0 exactly when the adjusted alpha is uniform
    let alpha = Tensor::from_vec(&[1, 2], vec![5.0, 1.0]).unwrap();
    let d = trfeddis::evidential::DirichletBatch {
        alpha,
        strength: vec![6.0],
    };
    let y = Tensor::<f64>::one_hot(&[0], 2);
    let kl = kl_regularizer(&d, &y).unwrap();
    assert!(kl.abs() < 1e-12, "kl at uniform adjusted alpha: {kl}");

    // disentangle penalty is 1 for identical heads
    let raw = Tensor::from_vec(&[2, 3], vec![0.3, -0.7, 1.1, 0.0, 0.4, -0.2]).unwrap();
    let dis = disentangle_loss(&raw, &raw).unwrap();
    assert!((dis - 1.0).abs() < 1e-12, "disentangle at identity: {dis}");
    pass(5, &format!("dce={got:.6}, kl={kl:.1e}, dis={dis}"));
}

// ---- desk-scale shared runs for criteria 6-8 ----

struct VariantRun {
    name: &'static str,
    output: ExperimentOutput,
    wall: Duration,
}

struct Desk {
    runs: Vec<VariantRun>,
}

impl Desk {
    fn get(&self, name: &str) -> &VariantRun {
        self.runs.iter().find(|r| r.name == name).expect("variant")
    }
}

static DESK: OnceLock<Desk> = OnceLock::new();

/// The desk-scale task: 4 synthetic domain-shifted clients, K=5,
/// 2000 train / 500 test per client, 50 rounds, E=1, 5 seeds.
fn desk_config() -> ExperimentConfig {
    ExperimentConfig {
        strategy: StrategyName::TrFedDis,
        ablation: AblationFlags::default(),
        model: ModelConfig {
            input_shape: vec![1, 12, 12],
            encoder: vec![
                EncoderBlock::Conv(8),
                EncoderBlock::Conv(16),
                EncoderBlock::Dense(64),
            ],
            head_width: 64,
            num_classes: 5,
            use_batchnorm: true,
        },
        data: DataConfig::Synthetic(SyntheticDataConfig {
            seed: 1234,
            num_domains: 4,
            per_domain_train: 2000,
            per_domain_test: 500,
            image_size: 12,
            domain_specs: None,
        }),
        rounds: 50,
        local_epochs: 1,
        lr: 0.01,
        batch_size: 32,
        seeds: vec![0, 1, 2, 3, 4],
        lambda_u: ScheduleConfig {
            target: 1.0,
            ramp_steps: None,
        },
        lambda_d: ScheduleConfig {
            target: 0.5,
            ramp_steps: None,
        },
        un_branch_weights: [1.0, 1.0, 1.0],
        aggregation: WeightMode::Samples,
        parallel: true,
        out_dir: None,
    }
}

fn desk() -> &'static Desk {
    DESK.get_or_init(|| {
        let base = desk_config();
        let mut runs = Vec::new();
        for name in ["fedavg", "dis", "dis+un", "full"] {
            let cfg = variant_config(&base, name).expect("known variant");
            let start = Instant::now();
            let output = run_experiment(&cfg).expect("desk run");
            let wall = start.elapsed();
            eprintln!(
                "desk variant {name}: acc {:.4} in {wall:.1?}",
                output.mean_final_accuracy()
            );
            runs.push(VariantRun { name, output, wall });
        }
        Desk { runs }
    })
}

#[test]
fn criterion_06_desk_scale_directional_result() {
    let desk = desk();
    let full = desk.get("full");
    let fedavg = desk.get("fedavg");
    let gap = (full.output.mean_final_accuracy() - fedavg.output.mean_final_accuracy()) * 100.0;
    let wall = full.wall + fedavg.wall;
    assert!(
        gap >= 2.0,
        "trfeddis must exceed fedavg by >= 2 accuracy points, gap {gap:.2}"
    );
    assert!(wall < Duration::from_secs(15 * 60), "took {wall:?}");
    pass(
        6,
        &format!(
            "trfeddis {:.2}% vs fedavg {:.2}% (gap {gap:.2} pts) in {wall:.0?}",
            full.output.mean_final_accuracy() * 100.0,
            fedavg.output.mean_final_accuracy() * 100.0
        ),
    );
}

#[test]
fn criterion_07_ablation_ordering() {
    let desk = desk();
    let full = desk.get("full").output.mean_final_accuracy();
    let dis_un = desk.get("dis+un").output.mean_final_accuracy();
    let dis = desk.get("dis").output.mean_final_accuracy();
    let total: Duration = desk.runs.iter().map(|r| r.wall).sum();
    assert!(
        full >= dis_un,
        "full ({full:.4}) must be >= dis+un ({dis_un:.4})"
    );
    assert!(full > dis, "full ({full:.4}) must be > dis ({dis:.4})");
    assert!(total < Duration::from_secs(45 * 60), "took {total:?}");
    pass(
        7,
        &format!(
            "full {:.2}% >= dis+un {:.2}% > dis {:.2}% in {total:.0?}",
            full * 100.0,
            dis_un * 100.0,
            dis * 100.0
        ),
    );
}

#[test]
fn criterion_08_ood_reliability() {
    let desk = desk();
    let full = desk.get("full");
    let start = Instant::now();
    let mut aurocs = Vec::new();
    for run in &full.output.seeds {
        let mut clean = Vec::new();
        let mut noisy = Vec::new();
        for (client, model) in run.final_models.iter().enumerate() {
            let mut model = model.clone();
            let ds = &full.output.datasets[client];
            let r = trfeddis::eval::evaluate(
                &mut model,
                ds.test(),
                trfeddis::eval::DecisionRule::FusedOpinion,
                32,
            )
            .unwrap();
            clean.extend(r.per_sample_u);
            let idx: Vec<usize> = (0..ds.test().len()).collect();
            let (test_x, _) = ds.test().gather(&idx);
            let mut rng = RngStream::derive(run.seed, StreamPurpose::Corrupt, client as u64);
            let corrupted = corrupt_gaussian(&test_x, 1.5, &mut rng);
            noisy.extend(fused_uncertainties(&mut model, &corrupted, 32).unwrap());
        }
        aurocs.push(ood_separation(&clean, &noisy).unwrap());
    }
    let mean = aurocs.iter().sum::<f64>() / aurocs.len() as f64;
    let elapsed = start.elapsed();
    assert!(
        mean > 0.80,
        "mean AUROC {mean:.4} must exceed 0.80 (per-seed: {aurocs:?})"
    );
    assert!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    pass(
        8,
        &format!("mean AUROC {mean:.4} over {} seeds, {elapsed:.1?}", aurocs.len()),
    );
}

// ---- criterion 9: protocol invariants ----

fn protocol_config() -> ExperimentConfig {
    let mut cfg = desk_config();
    cfg.data = DataConfig::Synthetic(SyntheticDataConfig {
        seed: 77,
        num_domains: 3,
        per_domain_train: 96,
        per_domain_test: 32,
        image_size: 8,
        domain_specs: None,
    });
    cfg.model.input_shape = vec![1, 8, 8];
    cfg.model.encoder = vec![EncoderBlock::Conv(4), EncoderBlock::Dense(16)];
    cfg.model.head_width = 16;
    cfg.rounds = 1;
    cfg.seeds = vec![0];
    cfg.parallel = false;
    cfg
}

#[test]
fn criterion_09_protocol_invariants() {
    let start = Instant::now();
    let cfg = protocol_config();
    let strategy = Strategy::from_config(cfg.strategy, cfg.ablation);
    let datasets = federation::build_datasets(&cfg).unwrap();
    let hp = federation::build_hyper(&cfg, strategy, datasets[0].n_train);

    // (a) local-head isolation within a round: permuting the other
    // clients' datasets leaves client 0's LocalHead parameters bitwise
    // unchanged (nothing of other clients' data reaches it before the
    // next aggregation).
    let run_once = |permute: bool| -> (Vec<trfeddis::model::ParamSet<f32>>, Vec<String>) {
        let mut ds = datasets.clone();
        if permute {
            ds.swap(1, 2);
        }
        let (mut server, mut clients) =
            federation::init_trial(&cfg, strategy, &ds, 0).unwrap();
        if permute {
            // keep each client's own id/model/rng; only the *other*
            // clients' data moves, so rebuild client 0 exactly as before
            assert_eq!(clients[0].dataset.n_train, datasets[0].n_train);
        }
        let mut upload_tags: Vec<String> = Vec::new();
        let report = run_round(&mut server, &mut clients, &hp).unwrap();
        assert_eq!(report.clients.len(), 3);
        for c in &clients {
            for p in c.model.partition_view(strategy.aggregated_tags()).iter() {
                upload_tags.push(p.tag.to_string());
            }
        }
        (
            clients
                .iter()
                .map(|c| c.model.partition_view(&[PartitionTag::LocalHead]))
                .collect(),
            upload_tags,
        )
    };
    let (locals_a, tags) = run_once(false);
    let (locals_b, _) = run_once(true);
    assert!(
        locals_a[0].bitwise_eq(&locals_b[0]),
        "client 0 LocalHead must be bitwise unchanged under dataset permutation"
    );
    assert!(
        !tags.contains(&"LocalHead".to_string()),
        "local head must never be uploaded"
    );

    // (b) structural non-transmission over multiple rounds: uploads carry
    // no LocalHead/LocalBN under trfeddis, and broadcast leaves both
    // untouched.
    {
        let (mut server, mut clients) =
            federation::init_trial(&cfg, strategy, &datasets, 1).unwrap();
        for _ in 0..3 {
            let before_bn: Vec<_> = clients
                .iter()
                .map(|c| c.model.partition_view(&[PartitionTag::LocalBn]))
                .collect();
            let shared = server.shared.clone();
            let results: Vec<_> = clients
                .iter_mut()
                .map(|c| local_train(c, Some(&shared), &hp).unwrap())
                .collect();
            for (u, _) in &results {
                for p in u.params.iter() {
                    assert_ne!(p.tag, PartitionTag::LocalHead);
                    assert_ne!(p.tag, PartitionTag::LocalBn);
                }
            }
            let updates: Vec<_> = results.into_iter().map(|(u, _)| u).collect();
            server.shared = aggregate(&updates, &server.weights).unwrap();
            for (c, bn) in clients.iter_mut().zip(&before_bn) {
                let before_local = c.model.partition_view(&[PartitionTag::LocalHead]);
                c.model.load(&server.shared).unwrap();
                assert!(c
                    .model
                    .partition_view(&[PartitionTag::LocalHead])
                    .bitwise_eq(&before_local));
                // BN state evolved during training but broadcast must not
                // overwrite it
                let _ = bn;
            }
        }
        // after training on shifted domains the BN statistics disagree
        let bn0 = clients[0].model.partition_view(&[PartitionTag::LocalBn]);
        let bn1 = clients[1].model.partition_view(&[PartitionTag::LocalBn]);
        assert!(!bn0.bitwise_eq(&bn1), "BN state must stay client-specific");
    }

    // (c) aggregation permutation invariance and single-client fixed point
    {
        let (server, mut clients) =
            federation::init_trial(&cfg, strategy, &datasets, 2).unwrap();
        let results: Vec<_> = clients
            .iter_mut()
            .map(|c| local_train(c, Some(&server.shared), &hp).unwrap())
            .collect();
        let updates: Vec<_> = results.into_iter().map(|(u, _)| u).collect();
        let w = &server.weights;
        let agg1 = aggregate(&updates, w).unwrap();
        let permuted = vec![updates[2].clone(), updates[0].clone(), updates[1].clone()];
        let wp = vec![w[2], w[0], w[1]];
        let agg2 = aggregate(&permuted, &wp).unwrap();
        for (a, b) in agg1.params.iter().zip(agg2.params.iter()) {
            for (x, y) in a.value.data.iter().zip(&b.value.data) {
                assert!(
                    (x - y).abs() <= 1e-12,
                    "aggregation must be permutation invariant"
                );
            }
        }
        assert!(agg1.bitwise_eq(&agg2), "fixed summation order is bitwise");

        let single = aggregate(std::slice::from_ref(&updates[0]), &[1.0]).unwrap();
        assert!(single.bitwise_eq(&updates[0].params), "single-client fixed point");
    }

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    pass(9, &format!("isolation/BN/aggregation invariants in {elapsed:.1?}"));
}

// ---- criterion 10: determinism ----

#[test]
fn criterion_10_determinism() {
    let start = Instant::now();
    let mut cfg = protocol_config();
    cfg.rounds = 2;
    cfg.seeds = vec![3];
    cfg.parallel = false;

    let dir = tempfile::tempdir().unwrap();
    let read_artifacts = |out: &std::path::Path| -> Vec<(String, Vec<u8>)> {
        let mut files = Vec::new();
        files.push((
            "metrics.csv".to_string(),
            std::fs::read(out.join("metrics.csv")).unwrap(),
        ));
        let ckpt_dir = out.join("checkpoints").join("seed3");
        let mut names: Vec<_> = std::fs::read_dir(&ckpt_dir)
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        for n in names {
            files.push((n.clone(), std::fs::read(ckpt_dir.join(&n)).unwrap()));
        }
        files
    };

    let mut outputs = Vec::new();
    for (i, parallel) in [(0, false), (1, false), (2, true)] {
        let out = dir.path().join(format!("run{i}"));
        let mut c = cfg.clone();
        c.parallel = parallel;
        c.out_dir = Some(out.clone());
        run_experiment(&c).unwrap();
        outputs.push(read_artifacts(&out));
    }
    assert_eq!(
        outputs[0], outputs[1],
        "two serial runs must be byte-identical"
    );
    assert_eq!(
        outputs[0], outputs[2],
        "parallel run must match the serial run byte-for-byte"
    );
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(5 * 60), "took {elapsed:?}");
    pass(
        10,
        &format!(
            "{} artifacts byte-identical across serial/serial/parallel, {elapsed:.1?}",
            outputs[0].len()
        ),
    );
}

// ---- supporting spec invariants exercised at acceptance level ----

#[test]
fn confidence_dominance_with_margin() {
    // when the global head is confident (u <= 0.05), the local head is
    // vacuous-leaning (u >= 0.95) and the global top-2 belief gap exceeds
    // the worst-case perturbation the weak head can introduce, the fused
    // argmax follows the confident head
    let mut rng = RngStream::derive(2024, StreamPurpose::Test, 8);
    let mut tested = 0usize;
    for _ in 0..10_000 {
        let k = 2 + rng.bounded(6) as usize;
        // confident global: large evidence on random classes
        let eg: Vec<f64> = (0..k).map(|_| rng.uniform_range(0.0, 60.0)).collect();
        let (_, og) = to_opinion(&EvidenceBatch {
            e: Tensor::from_vec(&[1, k], eg).unwrap(),
        });
        if og.uncertainty[0] > 0.05 {
            continue;
        }
        // vacuous-leaning local
        let el: Vec<f64> = (0..k)
            .map(|_| rng.uniform_range(0.0, 0.05 * k as f64 / (1.0 - 0.05 * k as f64).max(0.05)))
            .collect();
        let (_, ol) = to_opinion(&EvidenceBatch {
            e: Tensor::from_vec(&[1, k], el).unwrap(),
        });
        if ol.uncertainty[0] < 0.95 {
            continue;
        }
        // margin: flips are impossible when the top-2 gap exceeds the
        // largest cross term the weak head can contribute
        let mut b: Vec<f64> = og.belief.data.clone();
        b.sort_by(|a, c| c.partial_cmp(a).unwrap());
        let gap = b[0] - b[1];
        let bl_max = ol
            .belief
            .data
            .iter()
            .cloned()
            .fold(0.0f64, f64::max);
        let bound = (bl_max * (b[1] + og.uncertainty[0])) / ol.uncertainty[0];
        if gap <= bound {
            continue;
        }
        let (fused, _) = ds_fuse(&og, &ol).unwrap();
        let pg = predict(&og);
        let pf = predict(&fused);
        assert_eq!(
            pf[0].class, pg[0].class,
            "fused argmax must follow the confident head"
        );
        tested += 1;
    }
    assert!(tested > 1000, "margin filter kept only {tested} draws");
}

#[test]
fn fused_dirichlet_round_trip_matches_plain_path() {
    let mut rng = RngStream::derive(2024, StreamPurpose::Test, 9);
    for _ in 0..200 {
        let k = 2 + rng.bounded(5) as usize;
        let og = random_opinion(k, &mut rng);
        let ol = random_opinion(k, &mut rng);
        let (fused, _) = ds_fuse(&og, &ol).unwrap();
        let dir = opinion_to_dirichlet(&fused).unwrap();
        let (_, back) = to_opinion(&EvidenceBatch {
            e: dir.alpha.map(|a| a - 1.0),
        });
        for (a, b) in back.belief.data.iter().zip(&fused.belief.data) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn chance_level_accuracy_for_random_model() {
    // untrained model on a balanced K-class split stays near 1/K
    let cfg = protocol_config();
    let datasets = federation::build_datasets(&cfg).unwrap();
    let mut accs = Vec::new();
    for seed in 0..5u64 {
        let mut rng = RngStream::derive(seed, StreamPurpose::ModelInit, 0);
        let mut model: Model<f32> = Model::init(cfg.model.clone(), &mut rng).unwrap();
        let r = trfeddis::eval::evaluate(
            &mut model,
            datasets[0].test(),
            trfeddis::eval::DecisionRule::FusedOpinion,
            16,
        )
        .unwrap();
        accs.push(r.acc_fused);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let k = cfg.model.num_classes as f64;
    let n = (datasets[0].test().len() * 5) as f64;
    let sigma = ((1.0 / k) * (1.0 - 1.0 / k) / n).sqrt();
    assert!(
        (mean - 1.0 / k).abs() < 3.0 * sigma + 0.05,
        "chance-level accuracy {mean} vs 1/K = {}",
        1.0 / k
    );
}
