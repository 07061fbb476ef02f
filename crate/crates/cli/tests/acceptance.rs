//! One pass/fail line per acceptance criterion. Runs without the libtest
//! harness so the lines are printed even when output capture is on.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use common::{ecglab, json, ok, sha256, tree_hashes};
use ecglab::config::{TargetRule, TuningMode};
use ecglab::data::dataset::mix;
use ecglab::eval::{hamming_loss, macro_f1, roc_auc};
use ecglab::lora::{adapter_param_count, select_hosts_from_specs, trainable_param_count, LoraAdapter};
use ecglab::model::{open_gates, param_specs};
use ecglab::params::{Init, ParamKind, ParamSpec};
use ecglab::tokenizer::TokenSequence;
use ecglab::train::{cosine_lr, fit, prepare_model, TrainItem};
use ecglab::{MultimodalModel, RunConfig, Tensor};

type Outcome = Result<String, String>;

fn check(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

/// Uniform draw in `[0, 1)` from a counter.
fn unit(seed: u64) -> f64 {
    (mix(seed) >> 11) as f64 / (1u64 << 53) as f64
}

fn tiny() -> RunConfig {
    RunConfig::from_json_str(common::TINY, &[]).unwrap()
}

fn tiny_items(cfg: &RunConfig, n: usize) -> Vec<TrainItem> {
    (0..n)
        .map(|i| {
            let s = ecglab::data::dataset::generate_sample(
                &cfg.data,
                cfg.model.vision.image_size,
                ecglab::data::dataset::Split::Train,
                i,
                1,
            )
            .unwrap();
            TrainItem {
                image: s.image.to_tensor(1),
                seq: TokenSequence::instruction(&s.record.question, &s.record.answer),
            }
        })
        .collect()
}

fn logits(model: &MultimodalModel, image: &Tensor) -> Tensor {
    let ids = TokenSequence::instruction("Interpret this ECG.", "Findings: normal.").ids;
    let f = model.visual_features(image).unwrap();
    model.logits_with_features(Some(&f), &ids).unwrap()
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let out = ecglab(&["gradcheck"]);
    let secs = start.elapsed().as_secs_f64();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let lines = stdout
        .lines()
        .filter(|l| l.starts_with("PASS") || l.starts_with("FAIL"))
        .count();
    check(
        out.status.success(),
        format!("gradcheck exited {:?}: {stdout}", out.status.code()),
    )?;
    check(secs < 60.0, format!("took {secs:.1}s"))?;
    Ok(format!("{lines} primitive and component checks pass in {secs:.1}s"))
}

fn lora_algebra() -> Outcome {
    let cfg = RunConfig::desk();
    let mut base = MultimodalModel::new(&cfg.model).unwrap();
    open_gates(&mut base, 0.4);
    let mut adapted = base.clone();
    adapted.attach_lora(&cfg.lora).unwrap();
    let img = Tensor::randn(&[128, 128, 1], 0.5, 1);
    check(
        logits(&base, &img).bit_eq(&logits(&adapted, &img)),
        "zero-init outputs differ",
    )?;

    let mut worst = 0.0f64;
    for trial in 0..50u64 {
        let mut c = tiny();
        c.model.seed = trial;
        c.lora.rank = 1 + (mix(trial) % 8) as usize;
        c.lora.alpha = 0.5 + 31.5 * unit(trial ^ 0xa1);
        c.lora.target = if trial % 2 == 0 {
            TargetRule::Linear
        } else {
            TargetRule::All2d
        };
        c.lora.paper_mode = trial % 3 == 0;
        let mut m = MultimodalModel::new(&c.model).unwrap();
        open_gates(&mut m, 0.3);
        m.attach_lora(&c.lora).unwrap();
        for (name, p) in m.params.iter_mut() {
            if name.ends_with(".lora_b") {
                let fresh = Tensor::randn(p.tensor.shape(), 0.05, trial);
                p.tensor.data_mut().copy_from_slice(fresh.data());
            }
        }
        let img = Tensor::randn(&[32, 32, 1], 0.5, trial + 100);
        let before = logits(&m, &img);
        m.merge_lora().unwrap();
        worst = worst.max(before.max_abs_diff(&logits(&m, &img)));
    }
    check(worst < 1e-9, format!("merge deviation {worst:e}"))?;

    let mut lin = 0.0f64;
    for k in 0..20u64 {
        let ad = LoraAdapter {
            host_name: "w".into(),
            a: Tensor::randn(&[4, 9], 1.0, k),
            b: Tensor::randn(&[7, 4], 1.0, k + 50),
            scaling: 8.0 / 4.0,
        };
        let doubled = LoraAdapter {
            scaling: 16.0 / 4.0,
            ..ad.clone()
        };
        let (d1, d2) = (ad.delta().unwrap(), doubled.delta().unwrap());
        for (x, y) in d1.data().iter().zip(d2.data()) {
            lin = lin.max((2.0 * x - y).abs());
        }
    }
    check(lin < 1e-12, format!("alpha linearity deviation {lin:e}"))?;

    let mut c = tiny();
    c.lora.train_gates = false;
    c.train.base_lr = 1e-2;
    let mut m = prepare_model(&c, TuningMode::Lora).unwrap();
    let before = m.clone();
    fit(&mut m, &tiny_items(&c, 8), &c.train, None).unwrap();
    let moved: Vec<&str> = before
        .params
        .iter()
        .filter(|(_, p)| !matches!(p.kind, ParamKind::LoraA | ParamKind::LoraB))
        .filter(|(n, p)| !p.tensor.bit_eq(m.params.tensor(n).unwrap()))
        .map(|(n, _)| n)
        .collect();
    check(moved.is_empty(), format!("frozen tensors moved: {moved:?}"))?;
    Ok(format!(
        "zero-init bitwise, merge max dev {worst:.1e} over 50 configs, linearity {lin:.1e}, freeze intact"
    ))
}

fn accounting() -> Outcome {
    let mut models = 0;
    for target in [TargetRule::Linear, TargetRule::All2d] {
        for train_gates in [false, true] {
            let mut cfg = RunConfig::desk();
            cfg.lora.target = target.clone();
            cfg.lora.train_gates = train_gates;
            let m = prepare_model(&cfg, TuningMode::Lora).unwrap();
            let oracle: usize = m
                .params
                .iter()
                .filter(|(_, p)| p.tensor.requires_grad())
                .map(|(_, p)| p.tensor.shape().iter().product::<usize>())
                .sum();
            let counted = trainable_param_count(&m.params, m.lora.as_ref().unwrap());
            check(counted == oracle, format!("{target:?}: {counted} vs oracle {oracle}"))?;
            models += 1;
        }
    }
    let spec = [ParamSpec::new("w", &[4096, 4096], ParamKind::Linear, Init::Zeros)];
    let mut lora = RunConfig::desk().lora;
    lora.rank = 64;
    let paper = adapter_param_count(&select_hosts_from_specs(&spec, &lora).unwrap(), 64);
    check(paper == 524_288, format!("4096x4096 r64 gives {paper}"))?;

    let cfg = RunConfig::paper_shape();
    let mut lora = cfg.lora.clone();
    lora.target = TargetRule::All2d;
    let hosts = select_hosts_from_specs(&param_specs(&cfg.model), &lora).unwrap();
    let leaked: Vec<&String> = hosts
        .keys()
        .filter(|h| h.contains("lm_head") || h.contains("embed_tokens"))
        .collect();
    check(leaked.is_empty(), format!("excluded layers adapted: {leaked:?}"))?;
    Ok(format!(
        "{models} desk models match the entry oracle; 4096x4096 r64 = {paper}; lm_head and embed_tokens contribute 0"
    ))
}

fn architecture() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::paper_shape();
    let v = &cfg.model.vision;
    check(
        v.grid() == 32 && v.num_patches() == 1024,
        format!("grid {} N {}", v.grid(), v.num_patches()),
    )?;
    check(v.tap_layers == [3, 7, 15, 23, 30], format!("taps {:?}", v.tap_layers))?;
    check(v.output_dim() == 7680, format!("d' {}", v.output_dim()))?;
    let specs = param_specs(&cfg.model);
    let proj = specs.iter().find(|s| s.name == "projector.weight").unwrap();
    check(proj.shape == [4096, 7680], format!("projector {:?}", proj.shape))?;
    let cross = cfg.model.lm.cross_attn_layer_indices();
    check(
        cross == [3, 8, 13, 18, 23, 28, 33, 38],
        format!("cross layers {cross:?}"),
    )?;
    let secs = start.elapsed().as_secs_f64();
    check(secs < 5.0, format!("took {secs:.2}s"))?;
    Ok(format!(
        "grid 32x32, taps [3,7,15,23,30], d' 7680, projection 7680->4096, cross {cross:?} in {secs:.3}s"
    ))
}

fn metrics() -> Outcome {
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        let n = 2 + (mix(i) % 30) as usize;
        let scores: Vec<f64> = (0..n).map(|k| (unit(i * 1000 + k as u64) * 6.0).floor()).collect();
        let labels: Vec<u8> = (0..n).map(|k| u8::from(unit(i * 7777 + k as u64) < 0.5)).collect();
        let (mut wins, mut pairs) = (0.0, 0.0);
        for a in 0..n {
            for b in 0..n {
                if labels[a] == 1 && labels[b] == 0 {
                    pairs += 1.0;
                    wins += if scores[a] > scores[b] {
                        1.0
                    } else if scores[a] == scores[b] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        let got = roc_auc(&scores, &labels).unwrap();
        match got {
            Some(g) => worst = worst.max((g - wins / pairs).abs()),
            None => check(pairs == 0.0, "AUC undefined with both classes present")?,
        }

        let rows = 1 + (mix(i ^ 0x55) % 20) as usize;
        let k = 1 + (mix(i ^ 0x66) % 6) as usize;
        let bits = |salt: u64| -> Vec<Vec<u8>> {
            (0..rows)
                .map(|r| {
                    (0..k)
                        .map(|c| u8::from(unit(salt ^ (i << 20) ^ (r * 16 + c) as u64) < 0.35))
                        .collect()
                })
                .collect()
        };
        let (pred, truth) = (bits(0x1111), bits(0x2222));
        let (mut f1, mut wrong) = (0.0, 0.0);
        for c in 0..k {
            let tp = (0..rows).filter(|&r| pred[r][c] == 1 && truth[r][c] == 1).count() as f64;
            let pp = (0..rows).filter(|&r| pred[r][c] == 1).count() as f64;
            let tt = (0..rows).filter(|&r| truth[r][c] == 1).count() as f64;
            let (p, rc) = (
                if pp > 0.0 { tp / pp } else { 0.0 },
                if tt > 0.0 { tp / tt } else { 0.0 },
            );
            if p + rc > 0.0 {
                f1 += 2.0 * p * rc / (p + rc);
            }
            wrong += (0..rows).filter(|&r| pred[r][c] != truth[r][c]).count() as f64;
        }
        worst = worst.max((macro_f1(&pred, &truth).unwrap() - f1 / k as f64).abs());
        worst = worst.max((hamming_loss(&pred, &truth).unwrap() - wrong / (rows * k) as f64).abs());
    }
    check(worst < 1e-12, format!("oracle deviation {worst:e}"))?;
    let auc = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
    check(auc == Some(0.75), format!("worked AUC {auc:?}"))?;
    let h = hamming_loss(&[vec![1, 1, 1], vec![0, 1, 0]], &[vec![1, 0, 1], vec![0, 1, 0]]).unwrap();
    check(h == 1.0 / 6.0, format!("worked Hamming {h}"))?;
    Ok(format!("AUC, macro F1, Hamming match brute force on 100 instances each (max dev {worst:.1e}); AUC 0.75 and Hamming 1/6 exact"))
}

fn schedule() -> Outcome {
    let (base, min, t) = (2e-4, 0.0, 384);
    let l0 = cosine_lr(0, t, base, min).unwrap();
    let lt = cosine_lr(t, t, base, min).unwrap();
    let lh = cosine_lr(t / 2, t, base, min).unwrap();
    check((l0 - base).abs() <= 1e-15, format!("lr(0) = {l0:e}"))?;
    check((lt - min).abs() <= 1e-15, format!("lr(T) = {lt:e}"))?;
    check((lh - (base + min) / 2.0).abs() <= 1e-15, format!("lr(T/2) = {lh:e}"))?;
    Ok(format!("lr(0) {l0:e}, lr(T/2) {lh:e}, lr(T) {lt:e}"))
}

fn metric(report: &serde_json::Value, key: &str) -> f64 {
    report[key].as_f64().unwrap_or(f64::NAN)
}

fn desk_table() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    let data = p("data");
    ok(&["synth", "--out", &data, "--seed", "42"]);
    let base = json(&ok(&["eval", "--data", &data]));
    let ck = p("lora.ckpt");
    ok(&["train", "--data", &data, "--mode", "lora", "--out", &ck]);
    let tuned = json(&ok(&["eval", "--data", &data, "--checkpoint", &ck]));
    let secs = start.elapsed().as_secs_f64();

    let (b_auc, b_ham) = (metric(&base, "macro_auc"), metric(&base, "hamming_loss"));
    let (t_auc, t_f1) = (metric(&tuned, "macro_auc"), metric(&tuned, "macro_f1"));
    let (t_ham, t_rep) = (metric(&tuned, "hamming_loss"), metric(&tuned, "report_score"));
    let detail = format!(
        "baseline AUC {b_auc:.3} Hamming {b_ham:.3} report {:.1}; LoRA AUC {t_auc:.3} F1 {t_f1:.3} Hamming {t_ham:.3} report {t_rep:.1}; {secs:.0}s",
        metric(&base, "report_score")
    );
    let mut misses = Vec::new();
    if !(0.35..=0.65).contains(&b_auc) {
        misses.push("baseline AUC outside [0.35, 0.65]");
    }
    if !(b_ham >= 0.3) {
        misses.push("baseline Hamming < 0.3");
    }
    if !(t_auc >= 0.90) {
        misses.push("LoRA AUC < 0.90");
    }
    if !(t_f1 >= 0.70) {
        misses.push("LoRA F1 < 0.70");
    }
    if !(t_ham <= 0.15) {
        misses.push("LoRA Hamming > 0.15");
    }
    if !(t_rep >= 80.0) {
        misses.push("report score < 80");
    }
    if !(secs < 900.0) {
        misses.push("over 15 minutes");
    }
    if misses.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail} (missed: {})", misses.join("; ")))
    }
}

/// Reduced desk dataset for the sweep and the repeat runs.
const SMALL: [&str; 4] = ["--set", "data.n_train=48", "--set", "data.n_test=24"];

fn ablation() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data").to_str().unwrap().to_string();
    let out = dir.path().join("sweep.json").to_str().unwrap().to_string();
    ok(&[&["synth", "--out", &data][..], &SMALL].concat());
    ok(&[&["sweep-rank", "--data", &data, "--out", &out][..], &SMALL].concat());
    let table = json(&std::fs::read_to_string(&out).unwrap());
    let rows = table["rows"].as_array().cloned().unwrap_or_default();
    let lora: Vec<&serde_json::Value> = rows.iter().filter(|r| r["mode"] == "lora").collect();
    let ranks: Vec<u64> = lora.iter().filter_map(|r| r["rank"].as_u64()).collect();
    check(ranks == [16, 32, 64, 128], format!("ranks {ranks:?}"))?;
    let counts: Vec<u64> = lora.iter().filter_map(|r| r["trainable_params"].as_u64()).collect();
    check(counts.windows(2).all(|w| w[0] < w[1]), format!("counts {counts:?}"))?;
    check(
        lora.iter().all(|r| r["metrics"]["macro_auc"].is_number()),
        "missing per-rank report",
    )?;
    let partial = rows.iter().find(|r| r["mode"] == "partial").ok_or("no partial row")?;
    let groups = |r: &serde_json::Value| r["module_groups"].as_array().map_or(0, Vec::len);
    check(
        lora.iter().all(|r| groups(partial) < groups(r)),
        format!("partial trains {} groups", groups(partial)),
    )?;
    let aucs: Vec<String> = lora
        .iter()
        .map(|r| format!("{:.3}", metric(&r["metrics"], "macro_auc")))
        .collect();
    Ok(format!(
        "counts {counts:?}, AUC by rank [{}]; partial {} groups vs lora {}, partial AUC {:.3}",
        aucs.join(", "),
        groups(partial),
        groups(lora[0]),
        metric(&partial["metrics"], "macro_auc")
    ))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    let (a, b) = (p("a"), p("b"));
    ok(&["synth", "--out", &a, "--seed", "42"]);
    ok(&["synth", "--out", &b, "--seed", "42"]);
    let (ha, hb) = (tree_hashes(Path::new(&a)), tree_hashes(Path::new(&b)));
    check(ha == hb, "synth outputs differ")?;

    let small = p("small");
    ok(&[&["synth", "--out", &small][..], &SMALL].concat());
    let mut digests = Vec::new();
    for run in ["1", "2"] {
        let ck = p(&format!("run{run}.ckpt"));
        ok(&[&["train", "--data", &small, "--out", &ck][..], &SMALL].concat());
        let report = ok(&["eval", "--data", &small, "--checkpoint", &ck]);
        let log = std::fs::read(p(&format!("run{run}.log.jsonl"))).unwrap();
        digests.push((
            sha256(&std::fs::read(&ck).unwrap()),
            sha256(&log),
            sha256(report.as_bytes()),
        ));
    }
    check(digests[0].0 == digests[1].0, "checkpoints differ")?;
    check(digests[0].1 == digests[1].1, "training logs differ")?;
    check(digests[0].2 == digests[1].2, "reports differ")?;
    Ok(format!(
        "{} synth files, checkpoint {}, report {} identical across runs",
        ha.len(),
        &digests[0].0[..12],
        &digests[0].2[..12]
    ))
}

fn main() {
    let criteria: [(u8, &str, fn() -> Outcome); 9] = [
        (1, "gradient correctness", gradients),
        (2, "LoRA algebra", lora_algebra),
        (3, "parameter accounting", accounting),
        (4, "architecture constants", architecture),
        (5, "metric oracles", metrics),
        (6, "cosine schedule", schedule),
        (7, "desk fine-tuning table", desk_table),
        (8, "ablation harness", ablation),
        (9, "determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (n, name, f) in criteria {
        let label = format!("criterion {n}");
        if !filter.is_empty()
            && !filter
                .iter()
                .any(|f| label.contains(f.as_str()) || name.contains(f.as_str()))
        {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("{label} ({name}): PASS: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("{label} ({name}): FAIL: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
