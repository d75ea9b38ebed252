//! Acceptance suite: one test per criterion, each printing a pass line.
//!
//! Training-based criteria share fixtures: one synthetic dataset plus a
//! five-setting ablation matrix over seeds {1, 2, 3}, reused by the
//! ordering, similarity-shape, and disentanglement checks. Run with
//! `--nocapture` to see the per-criterion lines.

use cosa_core::agents::{self, AgentModel, ReplayMemory, ReplayRecord};
use cosa_core::config::{Toggles, TrainConfig};
use cosa_core::data::{generate_synthetic, Dataset, Labels, Split, SyntheticSpec, TaskKind};
use cosa_core::diagnostics::similarity_curves;
use cosa_core::dpsr;
use cosa_core::eval::{metrics_mer, metrics_msa, MsaMetricOptions};
use cosa_core::fusion::{fuse, loss_prediction, FusionMode, PredictionHead};
use cosa_core::gradcheck::{grad_check, GradCheckReport};
use cosa_core::module::Block;
use cosa_core::msd::{loss_contrast, loss_modality, loss_reconstruct, MsdModel};
use cosa_core::params::ParamStore;
use cosa_core::tape::{NodeRef, ParamMode, Tape};
use cosa_core::tensor::Tensor;
use cosa_core::trainer::{self, run_matrix, AblationRow, Adam, ComparisonTable};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

// ---------------------------------------------------------------------
// Shared fixtures
// ---------------------------------------------------------------------

const SEEDS: [u64; 3] = [1, 2, 3];
const ORDERING_SLACK: f64 = 1.02;

fn acceptance_spec() -> SyntheticSpec {
    SyntheticSpec {
        seed: 7,
        train_size: 400,
        valid_size: 100,
        test_size: 200,
        ..SyntheticSpec::default()
    }
}

fn desk_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::desk(TaskKind::Msa);
    cfg.seed = seed;
    cfg
}

struct DatasetFixture {
    manifest: PathBuf,
    dataset: Dataset,
}

fn dataset_fixture() -> &'static DatasetFixture {
    static FIXTURE: OnceLock<DatasetFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = Box::leak(Box::new(tempfile::tempdir().expect("tempdir")));
        let data_dir = dir.path().join("data");
        generate_synthetic(&acceptance_spec(), &data_dir).expect("generate dataset");
        let manifest = data_dir.join("manifest.json");
        let dataset = Dataset::load(&manifest).expect("load dataset");
        DatasetFixture { manifest, dataset }
    })
}

struct MatrixFixture {
    table: ComparisonTable,
    wall: std::time::Duration,
    workers: usize,
}

/// The five-setting matrix behind criteria 6, 7, 8, and 10.
fn matrix_fixture() -> &'static MatrixFixture {
    static FIXTURE: OnceLock<MatrixFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let data = dataset_fixture();
        let out = Box::leak(Box::new(tempfile::tempdir().expect("tempdir")));
        let base_toggles = Toggles::baseline();
        let rows = vec![
            AblationRow { name: "baseline".into(), toggles: base_toggles },
            AblationRow {
                name: "only MSD".into(),
                toggles: Toggles {
                    msd: true,
                    msd_modality: true,
                    msd_reconstruct: true,
                    msd_contrast: true,
                    ..base_toggles
                },
            },
            AblationRow {
                name: "only DPSR".into(),
                toggles: Toggles { dpsr: true, eta: true, ..base_toggles },
            },
            AblationRow {
                name: "only SAC".into(),
                toggles: Toggles { sac: true, ..base_toggles },
            },
            AblationRow { name: "full".into(), toggles: Toggles::default() },
        ];
        let jobs = rows.len() * SEEDS.len();
        let workers = std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
            .min(jobs);
        let start = Instant::now();
        let table = run_matrix(&desk_config(0), &data.manifest, &rows, &SEEDS, out.path())
            .expect("ablation matrix");
        MatrixFixture { table, wall: start.elapsed(), workers }
    })
}

fn mean_mae(table: &ComparisonTable, row: &str) -> f64 {
    table.mean_metric(row, "mae").expect("row has MAE")
}

/// Mean similarity curve over modalities and seeds for one matrix row,
/// on the fusion-side features when `reconstructed` (DPSR output) or on
/// the raw sentiment features otherwise.
fn row_mean_curve(row_name: &str, reconstructed: bool) -> Vec<f64> {
    let data = dataset_fixture();
    let matrix = matrix_fixture();
    let rows: Vec<_> = matrix
        .table
        .rows
        .iter()
        .filter(|r| r.name == row_name)
        .collect();
    assert!(!rows.is_empty());
    let t_len = data.dataset.manifest.seq_len;
    let mut mean = vec![0.0; t_len - 1];
    for row in &rows {
        let (_, model) =
            trainer::load_model(Path::new(&row.run_dir), &data.dataset, "best").expect("model");
        let curves =
            similarity_curves(&model, &data.dataset, Split::Test, reconstructed).expect("curves");
        for k in 0..t_len - 1 {
            mean[k] += (curves[0][k] + curves[1][k] + curves[2][k]) / 3.0;
        }
    }
    for v in &mut mean {
        *v /= rows.len() as f64;
    }
    mean
}

fn deterministic_values(n: usize, seed: u64, lo: f64, hi: f64) -> Vec<f64> {
    let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(12345);
    (0..n)
        .map(|_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            let u = ((state >> 11) as f64) / ((1u64 << 53) as f64);
            lo + u * (hi - lo)
        })
        .collect()
}

fn tensor64(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), deterministic_values(len, seed, lo, hi)).unwrap()
}

// ---------------------------------------------------------------------
// Criterion 1: gradient soundness
// ---------------------------------------------------------------------

const GC_H: f64 = 1e-3;
const GC_TOL: f64 = 1e-3;
const GC_B: usize = 2;
const GC_T: usize = 5;
const GC_EMBED: usize = 8;
const GC_DIMS: [usize; 3] = [4, 4, 6];

fn assert_gc(name: &str, report: &GradCheckReport) {
    assert!(
        report.passed(),
        "{name}: {} entries failed, worst {:?}",
        report.failures.len(),
        report.worst
    );
    assert!(report.entries_checked > 0, "{name}: nothing checked");
}

fn msd_stores(model: &MsdModel<f64>) -> Vec<ParamStore<f64>> {
    let mut stores = Vec::new();
    for b in &model.enc_sentiment {
        stores.push(b.params.convert());
    }
    for b in &model.enc_modality {
        stores.push(b.params.convert());
    }
    for b in &model.decoder {
        stores.push(b.params.convert());
    }
    stores.push(model.classifier.params.convert());
    stores
}

fn msd_with_stores(base: &MsdModel<f64>, stores: &[ParamStore<f64>]) -> MsdModel<f64> {
    let block = |b: &Block<f64>, p: &ParamStore<f64>| Block::<f64> {
        spec: b.spec.clone(),
        params: p.convert(),
    };
    MsdModel {
        enc_sentiment: [
            block(&base.enc_sentiment[0], &stores[0]),
            block(&base.enc_sentiment[1], &stores[1]),
            block(&base.enc_sentiment[2], &stores[2]),
        ],
        enc_modality: [
            block(&base.enc_modality[0], &stores[3]),
            block(&base.enc_modality[1], &stores[4]),
            block(&base.enc_modality[2], &stores[5]),
        ],
        decoder: [
            block(&base.decoder[0], &stores[6]),
            block(&base.decoder[1], &stores[7]),
            block(&base.decoder[2], &stores[8]),
        ],
        classifier: block(&base.classifier, &stores[9]),
        embed: base.embed,
    }
}

fn gc_inputs(tape: &mut Tape<f64>) -> [NodeRef; 3] {
    [0, 1, 2].map(|m| {
        tape.constant(tensor64(
            &[GC_B, GC_T, GC_DIMS[m]],
            100 + m as u64,
            -0.8,
            0.8,
        ))
    })
}

#[test]
fn criterion_1_gradient_soundness() {
    let start = Instant::now();
    let base: MsdModel<f64> = MsdModel::init(GC_DIMS, 8, GC_EMBED, 41).convert();
    let stores = msd_stores(&base);

    // L_m, L_c, L_r through the disentangling encoders.
    for (name, which) in [("L_m", 0), ("L_c", 1), ("L_r", 2)] {
        let base = msd_with_stores(&base, &stores);
        let loss_fn = move |tape: &mut Tape<f64>, stores: &[ParamStore<f64>]| {
            let model = msd_with_stores(&base, stores);
            let inputs = gc_inputs(tape);
            let pairs = model.disentangle(tape, &inputs, &[true; 3], ParamMode::Tracked)?;
            match which {
                0 => loss_modality(tape, &model, &pairs, &[true; 3], ParamMode::Tracked),
                1 => loss_contrast(tape, &pairs, &[true; 3], Some(10.0)),
                _ => loss_reconstruct(tape, &model, &inputs, &pairs, &[true; 3], ParamMode::Tracked),
            }
        };
        let report = grad_check(&stores, &loss_fn, GC_H, GC_TOL).unwrap();
        assert_gc(name, &report);
    }

    // L_dpsr (with and without interval weights) through reconstruction
    // and an upstream encoder.
    for use_eta in [true, false] {
        let enc = base.enc_sentiment[0].convert::<f64>();
        let spec = enc.spec.clone();
        let enc_stores = vec![enc.params.convert::<f64>()];
        let loss_fn = move |tape: &mut Tape<f64>, stores: &[ParamStore<f64>]| {
            let x = tape.constant(tensor64(&[GC_B, GC_T, GC_DIMS[0]], 300, -0.8, 0.8));
            let f_s = spec.forward(tape, &stores[0], x, ParamMode::Tracked)?;
            let rec = dpsr::reconstruct(tape, f_s)?;
            dpsr::loss_dpsr(tape, rec.reconstructed, use_eta)
        };
        let report = grad_check(&enc_stores, &loss_fn, GC_H, GC_TOL).unwrap();
        assert_gc(if use_eta { "L_dpsr(eta)" } else { "L_dpsr" }, &report);
    }

    // L_p both tasks, through encode -> weight -> fuse -> head.
    for task in [TaskKind::Msa, TaskKind::Mer] {
        let enc = base.enc_sentiment[0].convert::<f64>();
        let head32 = PredictionHead::init(task, 4, GC_EMBED, 8, FusionMode::Additive, 43);
        let head: PredictionHead<f64> = head32.convert();
        let mut stores = vec![enc.params.convert::<f64>()];
        stores.push(head.head.params.convert());
        let spec = enc.spec.clone();
        let head_spec = head.head.spec.clone();
        let loss_fn = move |tape: &mut Tape<f64>, stores: &[ParamStore<f64>]| {
            let head = PredictionHead::<f64> {
                adapter: None,
                head: Block { spec: head_spec.clone(), params: stores[1].convert() },
                task,
                classes: 4,
            };
            let inputs = gc_inputs(tape);
            let mut feats = Vec::new();
            for m in 0..3 {
                // One shared encoder keeps the check small; modality 0's
                // encoder maps only its own width.
                let f = if m == 0 {
                    spec.forward(tape, &stores[0], inputs[0], ParamMode::Tracked)?
                } else {
                    let t = tensor64(&[GC_B, GC_T, GC_EMBED], 400 + m as u64, -0.5, 0.5);
                    tape.constant(t)
                };
                feats.push(f);
            }
            let weights = tape.constant(tensor64(&[GC_B, GC_T], 500, 0.2, 0.9));
            let weighted = [0, 1, 2].map(|m| tape.scale_frames(feats[m], weights));
            let joint = fuse(tape, &weighted, &[true; 3], FusionMode::Additive)?;
            let pred = head.predict(tape, joint, ParamMode::Tracked)?;
            let labels = match task {
                TaskKind::Msa => Labels::Msa(vec![0.5, -1.25]),
                TaskKind::Mer => Labels::Mer(vec![0, 3]),
            };
            loss_prediction(tape, pred, &labels)
        };
        let report = grad_check(&stores, &loss_fn, GC_H, GC_TOL).unwrap();
        assert_gc(&format!("L_p({task:?})"), &report);
    }

    // Agent losses.
    let agents32 = AgentModel::init(GC_EMBED, 8, 4, 8, 45);
    let record = {
        let state: [Tensor<f32>; 3] =
            [0, 1, 2].map(|m| tensor64(&[GC_B, GC_T, GC_EMBED], 600 + m as u64, -0.7, 0.7).convert());
        let mut tape = Tape::<f32>::new();
        let nodes = [0, 1, 2].map(|i| tape.constant(state[i].clone()));
        let actions = agents32
            .act(&mut tape, &nodes, &[true; 3], false, ParamMode::Frozen)
            .unwrap();
        ReplayRecord {
            state: state.clone(),
            actions: [0, 1, 2].map(|i| tape.value(actions[i]).clone()),
            next_state: state,
            reward: vec![0.3, -0.6],
            active: [true; 3],
        }
    };
    let agents: AgentModel<f64> = agents32.convert();

    // L_critic with respect to the critic store.
    {
        let critic_stores = vec![agents.critic.params.convert::<f64>()];
        let base = agents.convert::<f64>();
        let record = record.clone();
        let targets = vec![0.4f32, -0.2];
        let loss_fn = move |tape: &mut Tape<f64>, stores: &[ParamStore<f64>]| {
            let mut model = base.convert::<f64>();
            model.critic = Block { spec: base.critic.spec.clone(), params: stores[0].convert() };
            agents::loss_critic(tape, &model, &record, &targets)
        };
        let report = grad_check(&critic_stores, &loss_fn, GC_H, GC_TOL).unwrap();
        assert_gc("L_critic", &report);
    }

    // L_actor with respect to actors and the shared transform (critic
    // frozen and randomized so the loss is not identically zero).
    {
        let mut agents32 = AgentModel::init(GC_EMBED, 8, 4, 8, 45);
        let shape = agents32.critic.params.value("l2.w").shape().to_vec();
        agents32
            .critic
            .params
            .set_value("l2.w", Tensor::from_fn(&shape, |i| ((i as f32) * 0.37).sin() * 0.4));
        let agents: AgentModel<f64> = agents32.convert();
        let actor_stores: Vec<ParamStore<f64>> = vec![
            agents.actors[0].params.convert(),
            agents.actors[1].params.convert(),
            agents.actors[2].params.convert(),
            agents.diff_transform.params.convert(),
        ];
        let base = agents.convert::<f64>();
        let state = record.state.clone();
        let loss_fn = move |tape: &mut Tape<f64>, stores: &[ParamStore<f64>]| {
            let mut model = base.convert::<f64>();
            for i in 0..3 {
                model.actors[i] = Block {
                    spec: base.actors[i].spec.clone(),
                    params: stores[i].convert(),
                };
            }
            model.diff_transform = Block {
                spec: base.diff_transform.spec.clone(),
                params: stores[3].convert(),
            };
            agents::loss_actor(tape, &model, &state, &[true; 3])
        };
        let report = grad_check(&actor_stores, &loss_fn, GC_H, GC_TOL).unwrap();
        assert_gc("L_actor", &report);
    }

    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs() < 60,
        "gradient checks took {elapsed:?}, budget is one minute"
    );
    println!("criterion 1 PASS: gradient soundness for all losses (rel err <= {GC_TOL} at h = {GC_H}, {elapsed:?})");
}

// ---------------------------------------------------------------------
// Criterion 2: exact-formula unit suite
// ---------------------------------------------------------------------

#[test]
fn criterion_2_exact_formula_suite() {
    const TOL: f64 = 1e-6;

    // Interval weights.
    let eta = dpsr::eta_matrix(50);
    assert_eq!(eta.data()[3 * 50 + 10], 43.0);
    assert_eq!(eta.data()[49], 1.0);
    let eta20 = dpsr::eta_matrix(20);
    assert_eq!(eta20.data()[4 * 20 + 5], 19.0);

    // Rewards.
    let msa = agents::reward(
        &Tensor::new(vec![2], vec![1.5, 2.0]).unwrap(),
        &Labels::Msa(vec![2.0, 2.0]),
    )
    .unwrap();
    assert!((msa[0] as f64 + 0.5).abs() < TOL);
    assert!((msa[1] as f64).abs() < TOL);
    let mer = agents::reward(&Tensor::zeros(&[1, 4]), &Labels::Mer(vec![1])).unwrap();
    assert!((mer[0] as f64 - 0.25).abs() < TOL);

    // Soft update.
    let mut live = ParamStore::<f32>::new("s", 0);
    live.add("w", &[3], cosa_core::params::Init::Zero).unwrap();
    live.set_value("w", Tensor::full(&[3], 1.0));
    let mut target = live.clone_as("s.target");
    target.set_value("w", Tensor::zeros(&[3]));
    target.soft_update_from(&live, 0.01).unwrap();
    assert!((target.value("w").data()[0] as f64 - 0.01).abs() < TOL);
    target.soft_update_from(&live, 1.0).unwrap();
    assert!((target.value("w").data()[0] as f64 - 1.0).abs() < TOL);

    // Fusion identities.
    let mut tape = Tape::<f32>::new();
    let f = [0, 1, 2].map(|m| {
        tape.constant(Tensor::from_fn(&[2, 3, 4], |i| ((i + m * 7) as f32 * 0.31).sin()))
    });
    let single = fuse(&mut tape, &f, &[false, true, false], FusionMode::Additive).unwrap();
    assert_eq!(tape.value(single).data(), tape.value(f[1]).data());
    let cat = fuse(&mut tape, &f, &[true; 3], FusionMode::Concatenative).unwrap();
    assert_eq!(tape.shape(cat), &[2, 3, 12]);
    let zero_w = tape.constant(Tensor::zeros(&[2, 3]));
    let weighted = f.map(|fi| tape.scale_frames(fi, zero_w));
    let zero_joint = fuse(&mut tape, &weighted, &[true; 3], FusionMode::Additive).unwrap();
    assert!(tape.value(zero_joint).data().iter().all(|&v| v == 0.0));

    // Replay FIFO and sampling determinism.
    let make_record = |tag: f32| {
        let state = [0, 1, 2].map(|_| Tensor::full(&[1, 2, 3], tag));
        ReplayRecord {
            state: state.clone(),
            actions: [0, 1, 2].map(|_| Tensor::full(&[1, 2], 0.5)),
            next_state: state,
            reward: vec![0.0],
            active: [true; 3],
        }
    };
    let mut memory = ReplayMemory::new(3, 0);
    assert!(memory.sample_indices(1).is_err());
    for tag in [1.0f32, 2.0, 3.0, 4.0] {
        memory.push(make_record(tag)).unwrap();
    }
    assert_eq!(memory.len(), 3);
    assert_eq!(memory.get(0).state[0].data()[0], 2.0);
    let mut a = ReplayMemory::new(4, 9);
    let mut b = ReplayMemory::new(4, 9);
    for tag in [1.0f32, 2.0] {
        a.push(make_record(tag)).unwrap();
        b.push(make_record(tag)).unwrap();
    }
    assert_eq!(a.sample_indices(6).unwrap(), b.sample_indices(6).unwrap());
    assert!(a.sample_indices(0).unwrap().is_empty());

    println!("criterion 2 PASS: exact formulas (eta, rewards, soft update, fusion, replay)");
}

// ---------------------------------------------------------------------
// Criterion 3: DPSR closed forms
// ---------------------------------------------------------------------

#[test]
fn criterion_3_dpsr_closed_forms() {
    const TOL: f64 = 1e-5;

    // Orthonormal rows: W = I and f = f_s.
    let mut tape = Tape::<f32>::new();
    let f = tape.constant(
        Tensor::new(
            vec![1, 3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap(),
    );
    let rec = dpsr::reconstruct(&mut tape, f).unwrap();
    for p in 0..3 {
        for q in 0..3 {
            let expect = if p == q { 1.0 } else { 0.0 };
            assert!((tape.value(rec.correlation).data()[p * 3 + q] as f64 - expect).abs() < TOL);
        }
    }
    for (a, b) in tape
        .value(rec.reconstructed)
        .data()
        .iter()
        .zip(tape.value(f).data())
    {
        assert!((*a as f64 - *b as f64).abs() < TOL);
    }

    // Identical frames at T = 2 with interval weights: loss 1.
    let same = tape.constant(Tensor::new(vec![1, 2, 3], vec![1.0, 2.0, -0.5, 1.0, 2.0, -0.5]).unwrap());
    let l = dpsr::loss_dpsr(&mut tape, same, true).unwrap();
    assert!((tape.value(l).item() as f64 - 1.0).abs() < TOL);

    // Mutually orthogonal frames without interval weights: loss 0.5.
    let ortho = tape.constant(
        Tensor::new(
            vec![1, 3, 3],
            vec![2.0, 0.0, 0.0, 0.0, 1.5, 0.0, 0.0, 0.0, 0.7],
        )
        .unwrap(),
    );
    let l = dpsr::loss_dpsr(&mut tape, ortho, false).unwrap();
    assert!((tape.value(l).item() as f64 - 0.5).abs() < TOL);

    // Opposite frames: loss 0.
    let opp = tape.constant(Tensor::new(vec![1, 2, 2], vec![1.0, -2.0, -1.0, 2.0]).unwrap());
    for use_eta in [true, false] {
        let l = dpsr::loss_dpsr(&mut tape, opp, use_eta).unwrap();
        assert!((tape.value(l).item() as f64).abs() < TOL);
    }

    println!("criterion 3 PASS: reconstruction and redundancy-loss closed forms to {TOL}");
}

// ---------------------------------------------------------------------
// Criterion 4: Bellman fixed point
// ---------------------------------------------------------------------

#[test]
fn criterion_4_bellman_fixed_point() {
    let start = Instant::now();
    let model32 = AgentModel::init(8, 8, 4, 8, 4);
    let state: [Tensor<f32>; 3] =
        [0, 1, 2].map(|m| tensor64(&[4, 5, 8], 700 + m as u64, -0.7, 0.7).convert());
    let mut tape = Tape::<f32>::new();
    let nodes = [0, 1, 2].map(|i| tape.constant(state[i].clone()));
    let actions = model32
        .act(&mut tape, &nodes, &[true; 3], false, ParamMode::Frozen)
        .unwrap();
    // Frozen environment: the next state equals the state, reward 1.
    let record = ReplayRecord {
        state: state.clone(),
        actions: [0, 1, 2].map(|i| tape.value(actions[i]).clone()),
        next_state: state,
        reward: vec![1.0; 4],
        active: [true; 3],
    };

    let mut model = model32;
    let mut adam = Adam::new();
    let gamma = 0.5;
    let zeta = 0.01;
    let lr = 5e-3;
    let mut mean_q = 0.0;
    let mut steps = 0;
    for step in 0..2000 {
        let targets = agents::td_targets(&model, &record, gamma).unwrap();
        model.critic.params.zero_grads();
        let mut tape = Tape::<f32>::new();
        let loss = agents::loss_critic(&mut tape, &model, &record, &targets).unwrap();
        let grads = tape.backward(loss).unwrap();
        model.critic.params.accumulate(&grads);
        adam.step(&mut [&mut model.critic.params], lr);
        model.soft_update(zeta).unwrap();
        steps = step + 1;

        let mut tape = Tape::<f32>::new();
        let s = [0, 1, 2].map(|i| tape.constant(record.state[i].clone()));
        let a = [0, 1, 2].map(|i| tape.constant(record.actions[i].clone()));
        let q = model
            .critic_q(&mut tape, &s, &a, false, ParamMode::Frozen)
            .unwrap();
        mean_q = tape.value(q).data().iter().map(|&v| v as f64).sum::<f64>() / 4.0;
        if (mean_q - 2.0).abs() < 0.02 && step > 200 {
            break;
        }
    }
    let elapsed = start.elapsed();
    assert!(
        (1.95..=2.05).contains(&mean_q),
        "mean Q = {mean_q} after {steps} steps, expected r/(1-gamma) = 2"
    );
    assert!(elapsed.as_secs() < 120, "took {elapsed:?}, budget is two minutes");
    println!(
        "criterion 4 PASS: constant-reward critic converged to Q = {mean_q:.4} in {steps} steps ({elapsed:?})"
    );
}

// ---------------------------------------------------------------------
// Criterion 5: metric oracle equivalence
// ---------------------------------------------------------------------

#[test]
fn criterion_5_metric_oracle_equivalence() {
    const TOL: f64 = 1e-9;
    let n = 200;
    let pred: Vec<f32> = deterministic_values(n, 21, -3.5, 3.5).iter().map(|&v| v as f32).collect();
    let truth: Vec<f32> = deterministic_values(n, 22, -3.0, 3.0).iter().map(|&v| v as f32).collect();

    let m = metrics_msa(&pred, &truth, MsaMetricOptions::default()).unwrap();

    // Brute-force oracle, formulated independently: moment sums for the
    // correlation, explicit counting loops for the accuracies.
    let p64: Vec<f64> = pred.iter().map(|&v| v as f64).collect();
    let t64: Vec<f64> = truth.iter().map(|&v| v as f64).collect();
    let nf = n as f64;
    let mae: f64 = p64.iter().zip(&t64).map(|(a, b)| (a - b).abs()).sum::<f64>() / nf;
    let ex = p64.iter().sum::<f64>() / nf;
    let ey = t64.iter().sum::<f64>() / nf;
    let exy = p64.iter().zip(&t64).map(|(a, b)| a * b).sum::<f64>() / nf;
    let exx = p64.iter().map(|a| a * a).sum::<f64>() / nf;
    let eyy = t64.iter().map(|a| a * a).sum::<f64>() / nf;
    let corr = (exy - ex * ey) / ((exx - ex * ex).sqrt() * (eyy - ey * ey).sqrt());

    let (mut correct, mut support) = (0usize, 0usize);
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (a, b) in p64.iter().zip(&t64) {
        if *b == 0.0 {
            continue;
        }
        support += 1;
        if (*a > 0.0) == (*b > 0.0) {
            correct += 1;
        }
        if *a > 0.0 && *b > 0.0 {
            tp += 1;
        }
        if *a > 0.0 && *b <= 0.0 {
            fp += 1;
        }
        if *a <= 0.0 && *b > 0.0 {
            fneg += 1;
        }
    }
    let acc2 = correct as f64 / support as f64;
    let f1 = 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64;
    let clamp7 = |v: f64| (v.round() as i64).clamp(-3, 3);
    let acc7 = p64
        .iter()
        .zip(&t64)
        .filter(|(a, b)| clamp7(**a) == clamp7(**b))
        .count() as f64
        / nf;

    assert!((m.mae - mae).abs() < TOL, "MAE {} vs oracle {mae}", m.mae);
    assert!((m.corr - corr).abs() < TOL, "Corr {} vs oracle {corr}", m.corr);
    assert!((m.acc2 - acc2).abs() < TOL);
    assert!((m.f1 - f1).abs() < TOL);
    assert!((m.acc7 - acc7).abs() < TOL);

    // MER against a confusion-matrix counting oracle.
    let classes = 4;
    let logits: Vec<f32> = deterministic_values(n * classes, 23, -2.0, 2.0)
        .iter()
        .map(|&v| v as f32)
        .collect();
    let labels: Vec<usize> = deterministic_values(n, 24, 0.0, classes as f64)
        .iter()
        .map(|&v| (v as usize).min(classes - 1))
        .collect();
    let m = metrics_mer(&logits, &labels, classes).unwrap();
    for c in 0..classes {
        let (mut tp, mut tn, mut fp, mut fneg) = (0usize, 0usize, 0usize, 0usize);
        for (row, &t) in logits.chunks(classes).zip(&labels) {
            let mut am = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[am] {
                    am = i;
                }
            }
            match (am == c, t == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => tn += 1,
            }
        }
        let acc = (tp + tn) as f64 / nf;
        let f1 = if tp + fneg == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
        };
        assert!((m.per_class[c].acc - acc).abs() < TOL, "class {c} acc");
        assert!((m.per_class[c].f1 - f1).abs() < TOL, "class {c} f1");
    }

    println!("criterion 5 PASS: MSA and MER metrics match brute-force oracles to {TOL}");
}

// ---------------------------------------------------------------------
// Criterion 6: ablation ordering
// ---------------------------------------------------------------------

#[test]
fn criterion_6_ablation_ordering() {
    let matrix = matrix_fixture();
    let baseline = mean_mae(&matrix.table, "baseline");
    let only_msd = mean_mae(&matrix.table, "only MSD");
    let only_dpsr = mean_mae(&matrix.table, "only DPSR");
    let only_sac = mean_mae(&matrix.table, "only SAC");
    let full = mean_mae(&matrix.table, "full");

    println!(
        "criterion 6 data: baseline {baseline:.4}, only MSD {only_msd:.4}, only DPSR {only_dpsr:.4}, only SAC {only_sac:.4}, full {full:.4}"
    );
    let budget = matrix.wall.as_secs_f64() * matrix.workers as f64;
    assert!(
        budget < 30.0 * 60.0,
        "matrix took ~{budget:.0}s of single-core time, budget is 30 minutes"
    );

    assert!(
        full <= only_sac * ORDERING_SLACK,
        "full {full:.4} should not trail only SAC {only_sac:.4} beyond 2%"
    );
    assert!(
        full <= only_dpsr * ORDERING_SLACK,
        "full {full:.4} should not trail only DPSR {only_dpsr:.4} beyond 2%"
    );
    assert!(
        full <= only_msd * ORDERING_SLACK,
        "full {full:.4} should not trail only MSD {only_msd:.4} beyond 2%"
    );
    assert!(
        only_msd <= baseline * ORDERING_SLACK,
        "only MSD {only_msd:.4} should not trail baseline {baseline:.4} beyond 2%"
    );
    println!(
        "criterion 6 PASS: mean test MAE ordering holds over seeds {SEEDS:?} (~{budget:.0}s single-core)"
    );
}

// ---------------------------------------------------------------------
// Criterion 7: similarity-vs-interval shape
// ---------------------------------------------------------------------

#[test]
fn criterion_7_similarity_interval_shape() {
    let t_len = dataset_fixture().dataset.manifest.seq_len;
    let enabled = row_mean_curve("full", true);
    let disabled = row_mean_curve("baseline", false);

    let gap = enabled[0] - enabled[t_len / 2 - 1];
    let span = disabled.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - disabled.iter().cloned().fold(f64::INFINITY, f64::min);
    println!(
        "criterion 7 data: enabled sim(1) = {:.3}, sim(T/2) = {:.3} (gap {gap:.3}); disabled span {span:.3}",
        enabled[0],
        enabled[t_len / 2 - 1]
    );
    assert!(
        gap >= 0.1,
        "reconstructed similarity should drop by >= 0.1 from interval 1 to T/2, got {gap:.3}"
    );
    assert!(
        span < 0.05,
        "without the module the curve should vary by < 0.05, got {span:.3}"
    );
    println!("criterion 7 PASS: interval-similarity shape (gap {gap:.3} >= 0.1, flat span {span:.3} < 0.05)");
}

// ---------------------------------------------------------------------
// Criterion 8: modality-subset ordering
// ---------------------------------------------------------------------

#[test]
fn criterion_8_modality_subset_ordering() {
    let data = dataset_fixture();
    let out = tempfile::tempdir().unwrap();

    // Trimodal runs come from the shared matrix ("full" is VAT).
    let trimodal = mean_mae(&matrix_fixture().table, "full");

    let subsets = ["V", "A", "T", "VA", "VT", "AT"];
    let jobs: Vec<(String, u64)> = subsets
        .iter()
        .flat_map(|s| SEEDS.iter().map(move |&seed| (s.to_string(), seed)))
        .collect();
    let results = std::sync::Mutex::new(Vec::<(String, f64)>::new());
    let queue = std::sync::Mutex::new(jobs);
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let job = { queue.lock().unwrap().pop() };
                let Some((subset, seed)) = job else { break };
                let mut cfg = desk_config(seed);
                cfg.modalities = subset.clone();
                let run_dir = out.path().join(format!("{subset}-{seed}"));
                let dataset = Dataset::load(&data.manifest).expect("dataset");
                trainer::train(&cfg, &dataset, &data.manifest, &run_dir, None).expect("train");
                let (_, model) = trainer::load_model(&run_dir, &dataset, "best").expect("model");
                let metrics =
                    trainer::metrics_for_split(&model, &dataset, Split::Test).expect("metrics");
                results
                    .lock()
                    .unwrap()
                    .push((subset, metrics["mae"].as_f64().unwrap()));
            });
        }
    });
    let results = results.into_inner().unwrap();
    let mean = |name: &str| {
        let v: Vec<f64> = results
            .iter()
            .filter(|(s, _)| s == name)
            .map(|(_, m)| *m)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (v, a, t) = (mean("V"), mean("A"), mean("T"));
    let (va, vt, at) = (mean("VA"), mean("VT"), mean("AT"));
    println!(
        "criterion 8 data: V {v:.4} A {a:.4} T {t:.4} | VA {va:.4} VT {vt:.4} AT {at:.4} | VAT {trimodal:.4}"
    );

    for (name, bi) in [("VA", va), ("VT", vt), ("AT", at)] {
        assert!(
            trimodal <= bi * ORDERING_SLACK,
            "trimodal {trimodal:.4} should not trail bimodal {name} {bi:.4} beyond 2%"
        );
    }
    for (name, bi, monos) in [
        ("VA", va, [v, a]),
        ("VT", vt, [v, t]),
        ("AT", at, [a, t]),
    ] {
        let best_mono = monos.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(
            bi <= best_mono * ORDERING_SLACK,
            "bimodal {name} {bi:.4} should not trail its best monomodal {best_mono:.4} beyond 2%"
        );
    }
    println!("criterion 8 PASS: trimodal <= bimodal <= best monomodal MAE with 2% slack");
}

// ---------------------------------------------------------------------
// Criterion 9: determinism
// ---------------------------------------------------------------------

#[test]
fn criterion_9_determinism() {
    let data = dataset_fixture();
    let mut cfg = desk_config(5);
    cfg.epochs = 8;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        let dataset = Dataset::load(&data.manifest).unwrap();
        trainer::train(&cfg, &dataset, &data.manifest, dir.path(), None).unwrap();
    }
    let a = std::fs::read(dirs[0].path().join("metrics.jsonl")).unwrap();
    let b = std::fs::read(dirs[1].path().join("metrics.jsonl")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b, "two identical (config, seed) runs must produce byte-identical logs");
    println!("criterion 9 PASS: byte-identical metrics logs for identical (config, seed)");
}

// ---------------------------------------------------------------------
// Criterion 10: disentanglement engages
// ---------------------------------------------------------------------

#[test]
fn criterion_10_msd_behavior() {
    let matrix = matrix_fixture();
    for row in matrix.table.rows.iter().filter(|r| r.name == "full") {
        let log = trainer::read_metrics_log(Path::new(&row.run_dir)).unwrap();
        let first = log.first().unwrap();
        let last = log.last().unwrap();
        assert!(
            last.msd_probe_acc >= 0.90,
            "seed {}: held-out modality-classifier accuracy {:.3} < 0.90",
            row.seed,
            last.msd_probe_acc
        );
        let ratio = last.msd_probe_dist / first.msd_probe_dist.max(1e-12);
        assert!(
            ratio >= 5.0,
            "seed {}: feature distance grew {ratio:.2}x, expected >= 5x of the epoch-0 value",
            row.seed
        );
        println!(
            "criterion 10 data: seed {} probe acc {:.3}, distance {:.2} -> {:.2} ({ratio:.1}x)",
            row.seed, last.msd_probe_acc, first.msd_probe_dist, last.msd_probe_dist
        );
    }
    println!("criterion 10 PASS: classifier accuracy >= 90% and feature distance >= 5x epoch-0");
}
