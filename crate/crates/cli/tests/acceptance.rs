//! End-to-end acceptance suite. Runs every criterion in order, prints one
//! pass/fail line per criterion, and exits non-zero if any fail.

use std::cell::RefCell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use msgn_core::dynamics::{BodyPartition, BranchKind, PartitionPreset};
use msgn_core::frame_temporal::{smp_counts, top_joints};
use msgn_core::gradcheck::grad_check;
use msgn_core::model::{Model, ModelConfig};
use msgn_core::skeleton::{load_canonical, parse_ntu_skeleton, split_protocol, write_canonical_file, IdLists, Protocol};
use msgn_core::synth;
use msgn_core::trainer::{TrainConfig, Trainer};
use msgn_core::Tensor;

type Outcome = Result<String, String>;

fn random_clip(rng: &mut ChaCha12Rng, n: usize, t: usize, j: usize) -> Vec<f64> {
    (0..n * t * j * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

// ---------------------------------------------------------------- 1
fn parameter_counts() -> Outcome {
    let ss = Model::new(
        ModelConfig {
            scales: vec![20],
            ..Default::default()
        },
        0,
    )
    .map_err(|e| e.to_string())?;
    let (_, ss_n) = ss.param_counts();
    let ms = Model::new(ModelConfig::default(), 0).map_err(|e| e.to_string())?;
    let (_, ms_n) = ms.param_counts();
    let sep = Model::new(
        ModelConfig {
            share_trunk: false,
            ..Default::default()
        },
        0,
    )
    .map_err(|e| e.to_string())?;
    let (_, sep_n) = sep.param_counts();

    let within = |n: usize, target: f64, tol: f64| (n as f64 / 1e6 - target).abs() <= target * tol;
    if !within(ss_n, 0.73, 0.03) {
        return Err(format!("single-scale count {ss_n} outside 0.73M +- 3%"));
    }
    if !within(ms_n, 1.50, 0.03) {
        return Err(format!("multi-scale count {ms_n} outside 1.50M +- 3%"));
    }
    if !within(sep_n, 2.19, 0.05) {
        return Err(format!("separate-trunk count {sep_n} outside 2.19M +- 5%"));
    }
    if sep_n <= ms_n {
        return Err("separate-trunk model is not larger than the shared one".into());
    }
    Ok(format!("counts {ss_n} / {ms_n} / {sep_n}"))
}

// ---------------------------------------------------------------- 2
fn gradient_correctness() -> Outcome {
    let cfg = ModelConfig {
        classes: 3,
        joints: 5,
        scales: vec![3, 4, 5],
        c1: 3,
        c2: 3,
        gcn_dims: vec![4, 4],
        c4: 5,
        kernel: 3,
        fi_hidden: 3,
        partition: PartitionPreset::Coarse1,
        reference_joint: 0,
        ..Default::default()
    };
    let mut model = Model::new(cfg, 1).map_err(|e| e.to_string())?;
    let mut rng = ChaCha12Rng::seed_from_u64(2);
    // check at a generic point: zero-initialised biases sit exactly on relu
    // kinks, where central differences and relu'(0) legitimately disagree
    for p in model.params.iter_mut() {
        for v in p.value.values.iter_mut() {
            let mag: f64 = rng.gen_range(0.01..0.05);
            *v += if rng.gen_bool(0.5) { mag } else { -mag };
        }
    }
    let clips: Vec<Vec<f64>> = [3usize, 4, 5]
        .iter()
        .map(|&t| random_clip(&mut rng, 4, t, 5))
        .collect();
    let labels = [0usize, 1, 2, 0];
    model.params.zero_grad();
    model
        .loss_and_backward(&clips, 4, &labels, 0.1)
        .map_err(|e| e.to_string())?;
    let mut ps = model.params.clone();
    let cell = RefCell::new(model);
    let report = grad_check(
        &mut ps,
        |p| {
            let mut m = cell.borrow_mut();
            m.params = p.clone();
            m.loss_forward(&clips, 4, &labels, 0.1).unwrap()
        },
        1e-5,
    );
    let scalars: usize = report.entries.iter().map(|e| e.coords_checked).sum();
    if !report.passes(1e-4) {
        let worst = report
            .entries
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .unwrap();
        return Err(format!(
            "max rel err {:.3e} at {} (checked {scalars} coords)",
            report.max_rel_err, worst.name
        ));
    }
    Ok(format!(
        "max rel err {:.3e} over {scalars} coordinates",
        report.max_rel_err
    ))
}

// ---------------------------------------------------------------- 3
fn adjacency_normalization() -> Outcome {
    let cfg = ModelConfig {
        classes: 4,
        joints: 25,
        scales: vec![100],
        c1: 8,
        c2: 8,
        gcn_dims: vec![8],
        c4: 8,
        fi_hidden: 4,
        ..Default::default()
    };
    let model = Model::new(cfg, 3).map_err(|e| e.to_string())?;
    let mut rng = ChaCha12Rng::seed_from_u64(4);
    let clip = random_clip(&mut rng, 1, 100, 25);
    let mut g = msgn_core::Graph::new();
    let dr = model
        .trunk_features(&mut g, &clip, 1, 100)
        .map_err(|e| e.to_string())?;
    let adj = model
        .trunk_adjacency(&mut g, dr)
        .map_err(|e| e.to_string())?;
    let v = g.values(adj);
    let mut worst = 0.0f64;
    for row in v.chunks(25) {
        let s: f64 = row.iter().sum();
        worst = worst.max((s - 1.0).abs());
        if row.iter().any(|&p| p <= 0.0) {
            return Err("non-positive adjacency entry".into());
        }
    }
    if worst > 1e-6 {
        return Err(format!("row sum deviates by {worst:.3e}"));
    }
    Ok(format!("100 frames, worst row-sum deviation {worst:.3e}"))
}

// ---------------------------------------------------------------- 4
fn joint_permutation_invariance() -> Outcome {
    let cfg = ModelConfig {
        classes: 4,
        joints: 25,
        scales: vec![3, 4],
        c1: 4,
        c2: 4,
        gcn_dims: vec![5, 5],
        c4: 6,
        fi_hidden: 3,
        partition: PartitionPreset::Fine5,
        ..Default::default()
    };
    let mut base = Model::new(cfg.clone(), 5).map_err(|e| e.to_string())?;
    let mut rng = ChaCha12Rng::seed_from_u64(6);
    let j = 25usize;
    let clips: Vec<Vec<f64>> = [3usize, 4]
        .iter()
        .map(|&t| random_clip(&mut rng, 2, t, j))
        .collect();
    let base_scores = base
        .predict_scores(&clips, 2)
        .map_err(|e| e.to_string())?;

    let mut worst = 0.0f64;
    for trial in 0..20 {
        let mut perm: Vec<usize> = (0..j).collect(); // perm[new] = old
        perm.shuffle(&mut rng);
        let mut inv = vec![0usize; j];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut m = Model::new(cfg.clone(), 5).map_err(|e| e.to_string())?;
        // carry each joint's type embedding along with it
        {
            let p = m.params.by_name_mut("jl.jt.w1").unwrap();
            let c1 = p.value.shape[0];
            let old_vals = p.value.values.clone();
            for r in 0..c1 {
                for new in 0..j {
                    p.value.values[r * j + new] = old_vals[r * j + perm[new]];
                }
            }
        }
        // relabel the body partition in the new joint order
        let old_part = BodyPartition::fine5();
        let new_ref: Vec<usize> = (0..j).map(|new| inv[old_part.ref_of[perm[new]]]).collect();
        m.partition = Some(BodyPartition { ref_of: new_ref });
        // permute the joints of every frame of every clip
        let perm_clips: Vec<Vec<f64>> = clips
            .iter()
            .map(|c| {
                let frames = c.len() / (j * 3);
                let mut out = vec![0.0; c.len()];
                for f in 0..frames {
                    for new in 0..j {
                        for k in 0..3 {
                            out[(f * j + new) * 3 + k] = c[(f * j + perm[new]) * 3 + k];
                        }
                    }
                }
                out
            })
            .collect();
        let scores = m
            .predict_scores(&perm_clips, 2)
            .map_err(|e| e.to_string())?;
        for (a, b) in scores.iter().flatten().zip(base_scores.iter().flatten()) {
            worst = worst.max((a - b).abs());
        }
        if worst > 1e-10 {
            return Err(format!("trial {trial}: score drift {worst:.3e} > 1e-10"));
        }
    }
    Ok(format!("20 permutations, worst drift {worst:.3e}"))
}

// ---------------------------------------------------------------- 5
fn frame_order_contract() -> Outcome {
    let mk = |use_fi: bool, kernel: usize| ModelConfig {
        classes: 4,
        joints: 10,
        scales: vec![6],
        c1: 6,
        c2: 6,
        gcn_dims: vec![8, 8],
        c4: 10,
        kernel,
        fi_hidden: 4,
        branches: vec![BranchKind::Position, BranchKind::FinePosition],
        partition: PartitionPreset::Coarse1,
        reference_joint: 0,
        use_frame_index: use_fi,
        ..Default::default()
    };
    let mut rng = ChaCha12Rng::seed_from_u64(8);
    let clip = random_clip(&mut rng, 1, 6, 10);
    let permute_frames = |c: &[f64], perm: &[usize]| -> Vec<f64> {
        let stride = 10 * 3;
        let mut out = vec![0.0; c.len()];
        for (dst, &src) in perm.iter().enumerate() {
            out[dst * stride..(dst + 1) * stride]
                .copy_from_slice(&c[src * stride..(src + 1) * stride]);
        }
        out
    };

    let logits = |m: &mut Model, c: &[f64]| -> Result<Vec<f64>, String> {
        let (g, out, _) = m.forward_scale(0, c, 1, false).map_err(|e| e.to_string())?;
        Ok(g.values(out).to_vec())
    };
    // order-blind variant: no frame-index term, pointwise temporal kernel,
    // no velocity-type branches
    let mut blind = Model::new(mk(false, 1), 9).map_err(|e| e.to_string())?;
    let base = logits(&mut blind, &clip)?;
    let mut worst_blind = 0.0f64;
    // order-aware variant: frame-index semantics back on
    let mut aware = Model::new(mk(true, 1), 9).map_err(|e| e.to_string())?;
    let base_aware = logits(&mut aware, &clip)?;
    let mut best_aware = 0.0f64;
    for _ in 0..20 {
        let mut perm: Vec<usize> = (0..6).collect();
        perm.shuffle(&mut rng);
        let pc = permute_frames(&clip, &perm);
        let s = logits(&mut blind, &pc)?;
        for (a, b) in s.iter().zip(&base) {
            worst_blind = worst_blind.max((a - b).abs());
        }
        let s = logits(&mut aware, &pc)?;
        for (a, b) in s.iter().zip(&base_aware) {
            best_aware = best_aware.max((a - b).abs());
        }
    }
    if worst_blind > 1e-5 {
        return Err(format!(
            "order-blind variant drifted {worst_blind:.3e} under frame permutation"
        ));
    }
    if best_aware < 1e-3 {
        return Err(format!(
            "frame-index variant only moved {best_aware:.3e}; expected > 1e-3"
        ));
    }
    Ok(format!(
        "blind drift {worst_blind:.3e}, aware drift {best_aware:.3e}"
    ))
}

// shared corpus and trained models for criteria 6 and 10
struct Overfit {
    data: Vec<msgn_core::SkeletonSequence>,
    train_ids: Vec<usize>,
    test_ids: Vec<usize>,
    full: Trainer,
    full_train_acc: f64,
    full_epochs: usize,
}

fn synth_corpus() -> (Vec<msgn_core::SkeletonSequence>, Vec<usize>, Vec<usize>) {
    let data = synth::generate(30, 16, 11);
    let mut train_ids = Vec::new();
    let mut test_ids = Vec::new();
    for (i, _) in data.iter().enumerate() {
        if i % 30 < 20 {
            train_ids.push(i);
        } else {
            test_ids.push(i);
        }
    }
    (data, train_ids, test_ids)
}

fn overfit_cfg(use_fi: bool, kernel: usize, order_branches: bool) -> ModelConfig {
    ModelConfig {
        classes: synth::SYNTH_CLASSES,
        joints: synth::SYNTH_JOINTS,
        scales: vec![8],
        c1: 16,
        c2: 16,
        gcn_dims: vec![24, 32],
        c4: 48,
        kernel,
        fi_hidden: 8,
        branches: if order_branches {
            vec![
                BranchKind::Position,
                BranchKind::Velocity,
                BranchKind::FinePosition,
                BranchKind::FineVelocity,
            ]
        } else {
            vec![BranchKind::Position, BranchKind::FinePosition]
        },
        partition: PartitionPreset::Fine5,
        use_frame_index: use_fi,
        ..Default::default()
    }
}

fn train_overfit(
    cfg: ModelConfig,
    min_epochs: usize,
    max_epochs: usize,
) -> Result<(Trainer, f64, usize), String> {
    let (data, train_ids, _) = synth_corpus();
    let model = Model::new(cfg, 13).map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        epochs: max_epochs,
        batch_size: 16,
        lr_steps: vec![],
        augment: None,
        eval_views: 3,
        seed: 13,
        ..Default::default()
    };
    let mut t = Trainer::new(model, tc);
    let mut train_acc = 0.0;
    let mut epochs = 0;
    while t.epoch < max_epochs {
        t.train_epoch(&data, &train_ids).map_err(|e| e.to_string())?;
        epochs = t.epoch;
        if t.epoch % 10 == 0 || t.epoch == max_epochs {
            let r = t.evaluate(&data, &train_ids).map_err(|e| e.to_string())?;
            train_acc = r.accuracy();
            if train_acc == 1.0 && t.epoch >= min_epochs {
                break;
            }
        }
    }
    Ok((t, train_acc, epochs))
}

fn overfit_oracle(shared: &mut Option<Overfit>) -> Outcome {
    let started = Instant::now();
    let (data, train_ids, test_ids) = synth_corpus();
    let (mut full, train_acc, epochs) =
        train_overfit(overfit_cfg(true, 3, true), 100, 300)?;
    if train_acc < 1.0 {
        return Err(format!(
            "full model reached only {train_acc:.3} train accuracy in 300 epochs"
        ));
    }
    let test = full.evaluate(&data, &test_ids).map_err(|e| e.to_string())?;
    if test.accuracy() < 0.90 {
        return Err(format!("test accuracy {:.3} < 0.90", test.accuracy()));
    }
    // the reversed-order pair must be separated by the full model...
    let pair_ok: usize = test.per_class[2].0 + test.per_class[3].0;
    let pair_n: usize = test.per_class[2].1 + test.per_class[3].1;
    if (pair_ok as f64) < 0.9 * pair_n as f64 {
        return Err(format!(
            "full model separates the reversed pair at only {pair_ok}/{pair_n}"
        ));
    }
    // ...and must NOT be separable once all order information is removed
    let (mut blind, _, _) = train_overfit(overfit_cfg(false, 1, false), 0, 80)?;
    let blind_test = blind.evaluate(&data, &test_ids).map_err(|e| e.to_string())?;
    let bp_ok = blind_test.per_class[2].0 + blind_test.per_class[3].0;
    let bp_n = blind_test.per_class[2].1 + blind_test.per_class[3].1;
    if (bp_ok as f64) >= 0.75 * bp_n as f64 {
        return Err(format!(
            "order-blind model separated the reversed pair ({bp_ok}/{bp_n})"
        ));
    }
    let msg = format!(
        "train 100% at epoch {epochs}, test {:.3}, pair full {pair_ok}/{pair_n} vs blind {bp_ok}/{bp_n}, {:.0?}",
        test.accuracy(),
        started.elapsed()
    );
    *shared = Some(Overfit {
        data,
        train_ids,
        test_ids,
        full,
        full_train_acc: train_acc,
        full_epochs: epochs,
    });
    Ok(msg)
}

// ---------------------------------------------------------------- 7
fn schedule_table() -> Outcome {
    let cfg = TrainConfig::default();
    let cases = [
        (1, 1e-3),
        (59, 1e-3),
        (60, 1e-4),
        (89, 1e-4),
        (90, 1e-5),
        (109, 1e-5),
        (110, 1e-6),
        (120, 1e-6),
    ];
    for (e, want) in cases {
        let got = cfg.lr_at(e);
        if (got - want).abs() > want * 1e-9 {
            return Err(format!("epoch {e}: lr {got} != {want}"));
        }
    }
    Ok("stepped decay exact on all four ranges".into())
}

// ---------------------------------------------------------------- 8
fn closed_form_losses() -> Outcome {
    let cfg = ModelConfig {
        classes: 120,
        joints: 5,
        scales: vec![3, 4, 5],
        c1: 3,
        c2: 3,
        gcn_dims: vec![4],
        c4: 5,
        fi_hidden: 3,
        partition: PartitionPreset::Coarse1,
        reference_joint: 0,
        ..Default::default()
    };
    let mut model = Model::new(cfg, 17).map_err(|e| e.to_string())?;
    // zero classifiers -> uniform logits at every branch
    for t in [3usize, 4, 5] {
        for suffix in ["w", "b"] {
            let p = model
                .params
                .by_name_mut(&format!("fl.t{t}.cls.{suffix}"))
                .unwrap();
            let n = p.value.values.len();
            p.value = Tensor::new(p.value.shape.clone(), vec![0.0; n]).unwrap();
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(18);
    let clips: Vec<Vec<f64>> = [3usize, 4, 5]
        .iter()
        .map(|&t| random_clip(&mut rng, 2, t, 5))
        .collect();
    let total = model
        .loss_forward(&clips, 2, &[7, 99], 0.1)
        .map_err(|e| e.to_string())?;
    let ln_k = 120f64.ln();
    if (total - 3.0 * ln_k).abs() > 1e-9 {
        return Err(format!("three-branch loss {total} != 3 ln 120 = {}", 3.0 * ln_k));
    }
    // single branch: uniform-logit smoothed CE = ln K
    let one = model
        .loss_forward(&clips[..1].to_vec(), 2, &[7, 99], 0.1)
        .map_err(|e| e.to_string())?;
    if (one - ln_k).abs() > 1e-9 {
        return Err(format!("single-branch loss {one} != ln 120"));
    }
    Ok(format!("ln 120 and 3 ln 120 hit within 1e-9"))
}

// ---------------------------------------------------------------- 9
fn round_trip_and_split_purity() -> Outcome {
    // small fixture corpus in the raw capture format
    let mut rng = ChaCha12Rng::seed_from_u64(19);
    let mut all = Vec::new();
    for (file, bodies, frames) in [
        ("S001C002P003R002A060.skeleton", 1usize, 3usize),
        ("S002C001P008R001A011.skeleton", 2, 4),
        ("S003C003P015R002A001.skeleton", 1, 2),
    ] {
        let mut text = format!("{frames}\n");
        for _ in 0..frames {
            text.push_str(&format!("{bodies}\n"));
            for b in 0..bodies {
                text.push_str(&format!("{} 0 0 0 0 0 0 0 0 2\n25\n", 100 + b));
                for _ in 0..25 {
                    let (x, y, z): (f32, f32, f32) = (rng.gen(), rng.gen(), rng.gen());
                    text.push_str(&format!("{x} {y} {z} 0 0 0 0 1 0 0 0 2\n"));
                }
            }
        }
        let seqs = parse_ntu_skeleton(&text, file).map_err(|e| e.to_string())?;
        if seqs.len() != bodies {
            return Err(format!("{file}: expected {bodies} bodies, got {}", seqs.len()));
        }
        all.extend(seqs);
    }
    let canon = write_canonical_file(&all, "ntu");
    let (_, back) = load_canonical(&canon).map_err(|e| e.to_string())?;
    if back != all {
        return Err("canonical round trip is not exact".into());
    }
    let ids = IdLists::ntu60();
    let mk = || {
        split_protocol(&all, "ntu", 120, Protocol::CrossSubject, &ids, 0.1, 42)
            .map_err(|e| e.to_string())
    };
    let (a, b) = (mk()?, mk()?);
    if a.digest() != b.digest() {
        return Err("manifest digest is not a pure function of its inputs".into());
    }
    Ok(format!(
        "{} records round-tripped exactly; digest {}..",
        back.len(),
        &a.digest()[..12]
    ))
}

// ---------------------------------------------------------------- 10
fn smp_probe(shared: &mut Option<Overfit>) -> Outcome {
    let ov = shared
        .as_mut()
        .ok_or("overfit model unavailable (criterion 6 failed)")?;
    if ov.full_train_acc < 1.0 {
        return Err("overfit model did not converge".into());
    }
    let c3 = ov.full.model.cfg.gcn_dims.last().copied().unwrap();
    let t = ov.full.model.cfg.scales[0];
    // the body part containing the displaced joints, zero-based: the right
    // arm for the hand classes, the left leg for the foot swing
    let right_arm: &[usize] = &[8, 9, 10, 11, 23, 24];
    let left_leg: &[usize] = &[12, 13, 14, 15];
    let moving: [&[usize]; 4] = [right_arm, left_leg, right_arm, right_arm];
    let mut checked = 0usize;
    let mut hits = 0usize;
    let ids: Vec<usize> = ov.test_ids.clone();
    for id in ids {
        let seq = ov.data[id].clone();
        let sampler = msgn_core::preprocess::SamplerConfig {
            clip_len: t,
            mode: msgn_core::preprocess::SampleMode::First,
        };
        let clip = msgn_core::preprocess::preprocess_sample(
            &seq,
            &sampler,
            ov.full.model.cfg.reference_joint,
            None,
            0,
        )
        .map_err(|e| e.to_string())?;
        let scores = ov
            .full
            .model
            .predict_scores(&[clip.clone()], 1)
            .map_err(|e| e.to_string())?;
        let pred = msgn_core::model::predict_class(&scores[0]);
        if pred != seq.label {
            continue; // only correctly classified sequences count
        }
        let (g, _, smp) = ov
            .full
            .model
            .forward_scale(0, &clip, 1, false)
            .map_err(|e| e.to_string())?;
        let counts = smp_counts(&g, smp, seq.joints).map_err(|e| e.to_string())?;
        let total: usize = counts[0].iter().sum();
        if total != c3 * t {
            return Err(format!("counts sum {total} != c3*T = {}", c3 * t));
        }
        let top = top_joints(&counts[0], 5);
        checked += 1;
        if top.iter().any(|(j, _)| moving[seq.label].contains(j)) {
            hits += 1;
        }
    }
    if checked == 0 {
        return Err("no correctly classified test sequences".into());
    }
    if (hits as f64) < 0.9 * checked as f64 {
        return Err(format!(
            "moving part in top-5 for only {hits}/{checked} sequences"
        ));
    }
    let _ = ov.full_epochs;
    let _ = &ov.train_ids;
    Ok(format!("conservation exact; moving part in top-5 for {hits}/{checked}"))
}

// ---------------------------------------------------------------- 11
fn determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_msgn");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data.msgn");
    let run = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(bin)
            .args(args)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!(
                "msgn {} failed: {}",
                args.join(" "),
                String::from_utf8_lossy(&out.stderr)
            ));
        }
        Ok(())
    };
    run(&[
        "synth",
        "--out",
        data.to_str().unwrap(),
        "--per-class",
        "4",
        "--frames",
        "10",
        "--seed",
        "2",
    ])?;
    let model_flags = [
        "--set", "model.classes=4",
        "--set", "model.joints=25",
        "--set", "model.scales=[4]",
        "--set", "model.c1=4",
        "--set", "model.c2=4",
        "--set", "model.gcn_dims=[6]",
        "--set", "model.c4=8",
        "--set", "model.fi_hidden=4",
        "--set", "train.batch_size=8",
        "--set", "train.eval_views=1",
        "--set", "data.ids=all-train",
        "--set", "data.val_fraction=0.0",
        "--seed", "7",
        "--deterministic",
    ];
    let train = |out_dir: &std::path::Path, epochs: usize| -> Result<(), String> {
        let mut args = vec![
            "train".to_string(),
            "--data".into(),
            data.to_str().unwrap().into(),
            "--out-dir".into(),
            out_dir.to_str().unwrap().into(),
            "--set".into(),
            format!("train.epochs={epochs}"),
        ];
        args.extend(model_flags.iter().map(|s| s.to_string()));
        let v: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
        run(&v)
    };
    let (a, b, c, d) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
        dir.path().join("d"),
    );
    // identical seeds -> byte-identical metrics
    train(&a, 4)?;
    train(&b, 4)?;
    let ma = std::fs::read(a.join("metrics.csv")).map_err(|e| e.to_string())?;
    let mb = std::fs::read(b.join("metrics.csv")).map_err(|e| e.to_string())?;
    if ma != mb {
        return Err("same-seed metrics files differ".into());
    }
    // interrupted + resumed run matches the uninterrupted one
    train(&c, 2)?;
    let mut args = vec![
        "resume".to_string(),
        "--checkpoint".into(),
        c.join("checkpoint.bin").to_str().unwrap().into(),
        "--data".into(),
        data.to_str().unwrap().into(),
        "--out-dir".into(),
        d.to_str().unwrap().into(),
        "--set".into(),
        "train.epochs=4".into(),
    ];
    args.extend(model_flags.iter().map(|s| s.to_string()));
    let v: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    run(&v)?;
    let ck_straight = std::fs::read(a.join("checkpoint.bin")).map_err(|e| e.to_string())?;
    let ck_resumed = std::fs::read(d.join("checkpoint.bin")).map_err(|e| e.to_string())?;
    if ck_straight != ck_resumed {
        return Err("resumed checkpoint differs from the uninterrupted run".into());
    }
    // the resumed metrics rows must equal the tail of the straight run
    let tail: Vec<String> = String::from_utf8_lossy(&ma)
        .lines()
        .skip(3)
        .map(str::to_string)
        .collect();
    let resumed: Vec<String> = std::fs::read_to_string(d.join("metrics.csv"))
        .map_err(|e| e.to_string())?
        .lines()
        .skip(1)
        .map(str::to_string)
        .collect();
    if tail != resumed {
        return Err("resumed metrics rows differ from the uninterrupted tail".into());
    }
    Ok("metrics byte-identical; resume matches uninterrupted checkpoint".into())
}

fn main() {
    let mut failures = 0usize;
    let mut shared: Option<Overfit> = None;
    let mut run = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| f()));
        let line = match result {
            Ok(Ok(info)) => format!("criterion {n:2} PASS [{name}] {info}"),
            Ok(Err(why)) => {
                failures += 1;
                format!("criterion {n:2} FAIL [{name}] {why}")
            }
            Err(_) => {
                failures += 1;
                format!("criterion {n:2} FAIL [{name}] panicked")
            }
        };
        println!("{line} ({:.1?})", start.elapsed());
    };

    run(1, "parameter counts", &mut parameter_counts);
    run(2, "gradient correctness", &mut gradient_correctness);
    run(3, "adjacency normalization", &mut adjacency_normalization);
    run(4, "joint-permutation invariance", &mut joint_permutation_invariance);
    run(5, "frame-order contract", &mut frame_order_contract);
    run(6, "overfit oracle", &mut || overfit_oracle(&mut shared));
    run(7, "schedule table", &mut schedule_table);
    run(8, "closed-form losses", &mut closed_form_losses);
    run(9, "round trip and split purity", &mut round_trip_and_split_purity);
    run(10, "pooling probe", &mut || smp_probe(&mut shared));
    run(11, "determinism", &mut determinism);

    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
