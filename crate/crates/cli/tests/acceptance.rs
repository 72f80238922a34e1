//! End-to-end acceptance run: every criterion prints one PASS/FAIL line,
//! the process fails if any criterion fails.
//!
//! Trains the toy profile several times, so it takes a while on one core.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use forgeloc::decoder::{grid_nodes, Gca, GcaConfig, Transform};
use forgeloc::frontend::ela_batch;
use forgeloc::loss::{combined_loss, dice, LossConfig};
use forgeloc::metrics::{fpr_neglog, image_f1, pixel_auc, pixel_f1, report, LogBase, MetricOptions};
use forgeloc::model::{Network, NetworkConfig};
use forgeloc::nn::{ParamStore, Session};
use forgeloc::synth::dataset::{load_manifest, sample_seed};
use forgeloc::synth::forge::{generate, ForgeConfig};
use forgeloc::synth::{Operation, Sample};
use forgeloc::tensor::{Graph, Tensor};
use forgeloc::train::ablate::{self, AblationRow, Axis};
use forgeloc::train::eval::{evaluate, predict_samples};
use forgeloc::train::{Checkpoint, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String), String>;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_forgeloc")
}

/// Runs the CLI and returns stdout, failing on a non-zero exit.
fn cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(bin()).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "forgeloc {} exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let out = Command::new(bin())
        .args(["gradcheck", "--trials", "100"])
        .output()
        .map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    let text = String::from_utf8_lossy(&out.stdout);
    let suites = text.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).count();
    let failed: Vec<&str> = text.lines().filter(|l| l.starts_with("FAIL")).collect();
    let ok = out.status.success() && failed.is_empty() && suites > 0 && secs < 300.0;
    Ok((ok, format!("{suites} suites, {} failed, {secs:.0} s (limit 300 s)", failed.len())))
}

fn loss_fixtures() -> Outcome {
    let cfg = LossConfig::default();
    let mut g = Graph::<f64>::new();
    let prob = g.leaf(Tensor::new(&[1, 1, 1, 1], vec![0.8]).map_err(err)?, true);
    let map = g.leaf(Tensor::new(&[1, 1, 2, 2], vec![0.9, 0.2, 0.6, 0.1]).map_err(err)?, true);
    let label = Tensor::new(&[1, 1, 1, 1], vec![1.0]).map_err(err)?;
    let mask = Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).map_err(err)?;
    let (total, _) = combined_loss(&mut g, prob, &label, map, &mask, &cfg).map_err(err)?;
    let total = g.value(total).item();
    let cls = -(0.8f64).ln();
    let dsc = -((3.0f64 + 1e-7) / (3.8 + 1e-7)).ln();
    let fl = (-0.04 * 0.9f64.ln() - 0.16 * 0.8f64.ln() - 0.64 * 0.6f64.ln() - 0.04 * 0.9f64.ln()) / 4.0;
    let expected = cls + 1.10 * dsc + 1.15 * fl;
    let d = dice(&[0.0f64; 100], &[1.0f64; 100], 1e-7);
    let weights = (cfg.w_cls, cfg.w_dice, cfg.w_focal, cfg.gamma, cfg.eps) == (1.0, 1.10, 1.15, 2.0, 1e-7);
    let ok = weights && (total - expected).abs() < 1e-9 && (d - 20.723).abs() < 1e-3;
    Ok((ok, format!("combined {total:.12} vs {expected:.12}, dice(0, |G|=100) {d:.4}")))
}

fn brute_auc(s: &[f64], l: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in (0..s.len()).filter(|&i| l[i]) {
        for j in (0..s.len()).filter(|&j| !l[j]) {
            pairs += 1.0;
            wins += if s[i] > s[j] {
                1.0
            } else if s[i] == s[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

fn brute_f1(s: &[f64], l: &[bool], th: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (&v, &t) in s.iter().zip(l) {
        match (v >= th, t) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            _ => {}
        }
    }
    if tp + fp + fn_ == 0.0 {
        1.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fn_)
    }
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let levels = rng.random_range(2..30) as f64;
        let labels: Vec<bool> = (0..256).map(|_| rng.random_bool(0.4)).collect();
        let scores: Vec<f64> = labels
            .iter()
            .map(|&l| ((rng.random::<f64>() + 0.3 * l as u8 as f64) * levels).round() / levels)
            .collect();
        let th = 0.5;
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            worst = worst.max((pixel_auc(&scores, &labels).map_err(err)? - brute_auc(&scores, &labels)).abs());
        }
        worst = worst.max((pixel_f1(&scores, &labels, th) - brute_f1(&scores, &labels, th)).abs());
        worst = worst.max((image_f1(&scores, &labels, th) - brute_f1(&scores, &labels, th)).abs());
        let fp = scores.iter().zip(&labels).filter(|&(&s, &l)| s >= th && !l).count() as f64;
        let (f, l) = fpr_neglog(&scores, &labels, th, LogBase::E);
        worst = worst.max((f - fp / 256.0).abs());
        worst = worst.max((l + (fp / 256.0).max(1.0 / 256.0).ln()).abs());
    }
    let hand = pixel_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).map_err(err)?;
    Ok((worst < 1e-9 && hand == 0.75, format!("max deviation {worst:.1e}, handcrafted AUC {hand}")))
}

fn l1(t: &Tensor<f64>) -> f64 {
    t.data().iter().map(|v| v.abs()).sum()
}

fn gca_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = 0;
    let mut pool_err = 0.0f64;
    for trial in 0..1000 {
        let transform = if trial % 2 == 0 { Transform::BottleneckLnRelu } else { Transform::Plain1x1 };
        let cfg = GcaConfig {
            transform,
            ..GcaConfig::default()
        };
        let (c_l, c_g) = (rng.random_range(1..6) * 4, rng.random_range(1..6));
        let (h, w) = (rng.random_range(1..7), rng.random_range(1..7));
        let mut store = ParamStore::<f64>::new();
        let gca = Gca::new(&mut store, "g", c_l, c_g, &cfg, &mut rng);
        for p in store.iter_mut() {
            p.value = Tensor::randn(p.value.shape(), 0.5, &mut rng);
        }
        let f_l = Tensor::randn(&[1, c_l, h, w], 1.0, &mut rng);
        let f_g = Tensor::randn(&[1, c_g, h, w], 1.0, &mut rng);
        let mut s = Session::new(&store, false);
        let (a, b) = (s.input(f_l.clone()), s.input(f_g));
        let out = gca.forward(&mut s, a, b).map_err(err)?;
        let gate_ok = s.graph.value(out.gate).data().iter().all(|&v| v > 0.0 && v < 1.0);
        if !gate_ok || l1(s.graph.value(out.theta)) > l1(&f_l) {
            violations += 1;
        }
        for id in [gca.pool.weight, gca.pool.bias.expect("pool bias")] {
            store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut s = Session::new(&store, false);
        let a = s.input(f_l.clone());
        let (ctx, _) = gca.context_pool(&mut s, a).map_err(err)?;
        let mut g = Graph::new();
        let x = g.constant(f_l);
        let mean = g.global_avg_pool(x).map_err(err)?;
        pool_err = pool_err.max(s.graph.value(ctx).max_abs_diff(g.value(mean)));
    }

    // Grid wiring: X^{i,j} takes j same-level features plus one from below.
    let cfg = NetworkConfig::default();
    let (net, store) = Network::new::<f64>(&cfg, 1).map_err(err)?;
    let image = Tensor::uniform(&[1, 3, 64, 64], 0.0, 1.0, &mut rng);
    let mut s = Session::new(&store, false);
    let out = net.forward(&mut s, image).map_err(err)?;
    let widths = cfg.encoder.stage_channels;
    let mut wired = net.decoder.nodes.len() == 10 && grid_nodes().len() == 10;
    for (node, o) in net.decoder.nodes.iter().zip(&out.decoder.nodes) {
        let (i, j) = (node.level, node.index);
        let f_l = s.graph.value(o.f_l);
        let expected: Vec<f64> = (0..j)
            .flat_map(|k| s.graph.value(out.decoder.grid[i][k]).data().to_vec())
            .collect();
        wired &= f_l.shape()[1] == j * widths[i] && f_l.data() == expected.as_slice();
    }
    let ok = violations == 0 && pool_err < 1e-6 && wired;
    Ok((
        ok,
        format!("1000 inputs, {violations} gate/L1 violations, uniform pool err {pool_err:.1e}, 10-node grid wired: {wired}"),
    ))
}

fn frontend_gray() -> Result<bool, String> {
    let gray = Tensor::<f32>::full(&[1, 3, 64, 64], 128.0 / 255.0);
    let ela = ela_batch(&gray, 90).map_err(err)?;
    let (net, store) = Network::new::<f32>(&NetworkConfig::default(), 0).map_err(err)?;
    let mut s = Session::new(&store, false);
    let (img, e) = (s.input(gray), s.input(ela.clone()));
    let parts = net.frontend.forward_parts(&mut s, img, e).map_err(err)?;
    let zero = |t: &Tensor<f32>| t.data().iter().all(|&v| v == 0.0);
    Ok(zero(&ela) && zero(s.graph.value(parts.srm)) && zero(s.graph.value(parts.bayar)))
}

/// Parsed `epochs.csv`: header names and one row of strings per epoch.
fn epochs_csv(run: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), String> {
    let text = fs::read_to_string(run.join("epochs.csv")).map_err(err)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty epochs.csv")?.split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    Ok((header, rows))
}

fn column(run: &Path, name: &str) -> Result<Vec<f64>, String> {
    let (header, rows) = epochs_csv(run)?;
    let k = header.iter().position(|h| h == name).ok_or(format!("no column {name}"))?;
    rows.iter().map(|r| r[k].parse::<f64>().map_err(err)).collect()
}

struct Toy {
    data: PathBuf,
    run: PathBuf,
    test: Vec<Sample>,
    train_minutes: f64,
}

fn load_best(run: &Path) -> Result<Trainer, String> {
    Trainer::from_checkpoint(Checkpoint::load(&run.join("best.ckpt")).map_err(err)?).map_err(err)
}

fn toy_training(toy: &Toy) -> Outcome {
    let t = load_best(&toy.run)?;
    let r = evaluate(&t.net, &t.store, &toy.test, &t.config.metrics, t.config.eval_batch_size).map_err(err)?;
    let losses = column(&toy.run, "train_total")?;
    let ma: Vec<f64> = losses.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    let monotone = ma.windows(2).all(|w| w[1] <= w[0]);
    let auc = r.pixel_auc.unwrap_or(0.0);
    let decreased = losses.last() < losses.first();
    let in_time = toy.train_minutes < 30.0;
    let ok = auc >= 0.85 && r.image_f1 >= 0.80 && monotone && decreased && in_time;
    Ok((
        ok,
        format!(
            "test pixel AUC {auc:.4} (≥ 0.85), image F1 {:.4} (≥ 0.80), 5-epoch MA monotone {monotone}, train loss {:.4} -> {:.4}, {:.1} min on one core (< 30)",
            r.image_f1,
            losses[0],
            losses[losses.len() - 1],
            toy.train_minutes
        ),
    ))
}

fn ablation(toy: &Toy) -> Outcome {
    let train = load_manifest(&toy.data.join("train/manifest.jsonl")).map_err(err)?;
    let val = load_manifest(&toy.data.join("val/manifest.jsonl")).map_err(err)?;
    let trained = load_best(&toy.run)?;
    let base = TrainConfig::toy();
    let mut rows: Vec<AblationRow> = Vec::new();
    for seed in [0u64, 1, 2] {
        for (name, cfg) in Axis::GcaVsBaseline.variants(&base) {
            let same_as_toy = TrainConfig {
                deterministic: trained.config.deterministic,
                seed,
                ..cfg.clone()
            } == trained.config;
            if same_as_toy {
                let r = evaluate(&trained.net, &trained.store, &toy.test, &cfg.metrics, cfg.eval_batch_size)
                    .map_err(err)?;
                rows.push(AblationRow {
                    variant: name,
                    seed,
                    pixel_auc: r.pixel_auc,
                    pixel_f1: r.pixel_f1,
                    image_f1: r.image_f1,
                    epochs: trained.state.epochs_done,
                });
            } else {
                rows.push(ablate::run_variant(&name, &cfg, seed, &train, &val, &toy.test).map_err(err)?);
            }
        }
    }
    let summary = ablate::summarize(&rows);
    print!("{}", ablate::table(&summary));
    let auc = |v: &str, s: u64| {
        rows.iter()
            .find(|r| r.variant == v && r.seed == s)
            .and_then(|r| r.pixel_auc)
            .unwrap_or(0.0)
    };
    let mean = |v: &str| (0..3).map(|s| auc(v, s)).sum::<f64>() / 3.0;
    let mut diffs: Vec<f64> = (0..3).map(|s| auc("gca", s) - auc("baseline", s)).collect();
    diffs.sort_by(f64::total_cmp);
    let (gca, baseline) = (mean("gca"), mean("baseline"));
    Ok((
        gca >= baseline - 0.02,
        format!(
            "mean test AUC gca {gca:.4} vs baseline {baseline:.4} (need ≥ baseline − 0.02); median diff {:+.4} (reported only)",
            diffs[1]
        ),
    ))
}

fn false_positive_claim(toy: &Toy) -> Outcome {
    let t = load_best(&toy.run)?;
    let authentic: Vec<Sample> = (0..50)
        .map(|i| generate(Operation::Authentic, sample_seed(0, 3, i), 64, 64, &ForgeConfig::default()))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let forged: Vec<Sample> = toy.test.iter().filter(|s| s.label.is_forged()).cloned().collect();
    let opts = MetricOptions::default();
    let batch = t.config.eval_batch_size;
    let a = report(&predict_samples(&t.net, &t.store, &authentic, batch, None).map_err(err)?, &opts);
    let f = report(&predict_samples(&t.net, &t.store, &forged, batch, None).map_err(err)?, &opts);
    let (na, nf) = (a.neglog_fpr_authentic.unwrap_or(0.0), f.neglog_fpr_forged.unwrap_or(f64::INFINITY));
    let frac = a.authentic_positive_fraction.unwrap_or(1.0);
    Ok((
        na >= nf && frac < 0.05,
        format!(
            "−ln FPR authentic {na:.3} vs forged-image authentic regions {nf:.3}; authentic positive fraction {:.2}%",
            100.0 * frac
        ),
    ))
}

fn determinism(data: &Path, work: &Path) -> Outcome {
    let train = |out: &Path, extra: &[&str]| -> Result<String, String> {
        let mut args = vec!["--deterministic", "train", "--data", p(data), "--out", p(out), "--seed", "0", "--epochs", "3"];
        args.extend_from_slice(extra);
        cli(&args)
    };
    let (a, b, c) = (work.join("det_a"), work.join("det_b"), work.join("det_c"));
    train(&a, &[])?;
    train(&b, &[])?;
    let read = |d: &Path, f: &str| fs::read(d.join(f)).map_err(err);
    let identical = read(&a, "last.ckpt")? == read(&b, "last.ckpt")? && read(&a, "best.ckpt")? == read(&b, "best.ckpt")?;
    train(&c, &["--stop-after", "1"])?;
    let resume = c.join("last.ckpt");
    cli(&["--deterministic", "train", "--data", p(data), "--out", p(&c), "--resume", p(&resume)])?;
    let resumed = read(&a, "epochs.csv")? == read(&c, "epochs.csv")? && read(&a, "last.ckpt")? == read(&c, "last.ckpt")?;
    Ok((
        identical && resumed,
        format!("two runs bit-identical: {identical}; resume after epoch 1 reproduces the curve and checkpoint: {resumed}"),
    ))
}

fn frontend(toy: &Toy) -> Outcome {
    let gray = frontend_gray()?;
    let violation = column(&toy.run, "bayar_violation")?;
    let worst = violation.iter().copied().fold(0.0, f64::max);
    Ok((
        gray && worst < 1e-6 && !violation.is_empty(),
        format!("gray image silent: {gray}; max Bayar violation over {} epochs {worst:.1e}", violation.len()),
    ))
}

fn robustness(toy: &Toy, work: &Path) -> Outcome {
    let ckpt = toy.run.join("best.ckpt");
    let run = |out: &Path| {
        cli(&["robustness", "--checkpoint", p(&ckpt), "--data", p(&toy.data), "--split", "test", "--out", p(out)])
    };
    let (a, b) = (work.join("sweep_a.csv"), work.join("sweep_b.csv"));
    run(&a)?;
    run(&b)?;
    let text = fs::read_to_string(&a).map_err(err)?;
    let rows: Vec<&str> = text.lines().skip(1).collect();
    let complete = rows.len() == 10 && rows.iter().all(|r| r.split(',').count() == 4 && !r.ends_with(','));
    let same = fs::read(&a).map_err(err)? == fs::read(&b).map_err(err)?;
    Ok((complete && same, format!("{} rows, complete {complete}, identical on rerun {same}", rows.len())))
}

fn infer_authentic(toy: &Toy, work: &Path) -> Outcome {
    let manifest = fs::read_to_string(toy.data.join("test/manifest.jsonl")).map_err(err)?;
    let entry = manifest
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).map_err(err))
        .find(|v| v.as_ref().map(|v| v["label"] == "authentic").unwrap_or(true))
        .ok_or("no authentic test image")??;
    let image = toy.data.join("test").join(entry["image"].as_str().ok_or("image path")?);
    let heat = work.join("heat.png");
    let out = cli(&["infer", "--checkpoint", p(&toy.run.join("best.ckpt")), "--image", p(&image), "--out", p(&heat)])?;
    let prob: f64 = out.trim().parse().map_err(err)?;
    Ok((prob < 0.5 && heat.exists(), format!("image-level probability {prob:.4} on {}", entry["id"])))
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(String, bool)> = Vec::new();
    let mut record = |name: &str, outcome: Outcome| {
        let (ok, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        results.push((name.to_string(), ok));
    };

    record("1 gradient suite", gradient_suite());
    record("2 loss fixtures", loss_fixtures());
    record("3 metric oracles", metric_oracles());
    record("4 GCA invariants", gca_invariants());

    let data = work.path().join("toy");
    let run = work.path().join("run");
    let prepared = cli(&["synth", "--out", p(&data), "--seed", "0"]).and_then(|_| {
        let start = Instant::now();
        cli(&["--deterministic", "train", "--data", p(&data), "--out", p(&run), "--seed", "0"])?;
        let train_minutes = start.elapsed().as_secs_f64() / 60.0;
        let test = load_manifest(&data.join("test/manifest.jsonl")).map_err(err)?;
        Ok(Toy {
            data,
            run,
            test,
            train_minutes,
        })
    });
    match prepared {
        Ok(toy) => {
            record("5 toy training", toy_training(&toy));
            record("7 false-positive claim", false_positive_claim(&toy));
            record("8 determinism", determinism(&toy.data, work.path()));
            record("9 frontend", frontend(&toy));
            record("10 robustness harness", robustness(&toy, work.path()));
            record("infer on an authentic test image", infer_authentic(&toy, work.path()));
            record("6 ablation trend", ablation(&toy));
        }
        Err(e) => {
            for name in ["5 toy training", "6 ablation trend", "7 false-positive claim", "8 determinism", "9 frontend", "10 robustness harness"] {
                record(name, Err(e.clone()));
            }
        }
    }

    let failed: Vec<&str> = results.iter().filter(|r| !r.1).map(|r| r.0.as_str()).collect();
    println!("{} of {} checks passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        eprintln!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
