//! End-to-end acceptance checks. Each check prints one PASS/FAIL line; the
//! process exits nonzero if any fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sact_core::act::{act_block_forward, ActHalting};
use sact_core::arch::{BlockSpec, HaltingMode, NetworkSpec};
use sact_core::autodiff::{Graph, Var};
use sact_core::flops::count_flops;
use sact_core::gradcheck::{network_gradcheck, toy_problem, FdOptions};
use sact_core::io::{load_checkpoint, load_dataset, load_masks};
use sact_core::kernels::BnMode;
use sact_core::model::HaltingAccumulator;
use sact_core::network::{BlockHalting, Network, ParamKind, ResidualUnitParams};
use sact_core::perforated::{dilate_mask, perforated_residual_apply_with_stats};
use sact_core::saliency::{auc_judd, masked_means, postprocess, total_ponder_map, Field, SaliencyParams};
use sact_core::train::derive_baseline_units;
use sact_core::{ActiveMask, Tensor};

type Outcome = Result<String, String>;

const TRADEOFF_SEEDS: [u64; 3] = [0, 1, 2];
const TRADEOFF_TAUS: [f64; 4] = [0.0, 0.001, 0.005, 0.01];

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fmt_err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn flops_anchors() -> Outcome {
    let cases = [
        ("resnet50 @224", NetworkSpec::resnet50(), 224, 8.18e9),
        ("resnet101 @224", NetworkSpec::resnet101(), 224, 1.56e10),
        ("resnet101 @352", NetworkSpec::resnet101(), 352, 3.85e10),
    ];
    let mut parts = Vec::new();
    for (name, spec, res, want) in cases {
        let got = count_flops(&spec, res).total as f64;
        let rel = got / want - 1.0;
        ensure(rel.abs() <= 0.02, || format!("{name}: {got:.4e} vs {want:.3e}"))?;
        parts.push(format!("{name} {got:.3e} ({:+.2}%)", rel * 100.0));
    }
    Ok(parts.join(", "))
}

fn random_unit(c: usize, width: usize, rng: &mut ChaCha8Rng) -> ResidualUnitParams<f64> {
    let mut u = ResidualUnitParams::zeros(c, width, c, 1);
    for layer in [&mut u.conv1, &mut u.conv2, &mut u.conv3] {
        layer.kernel = Tensor::from_fn(layer.kernel.shape(), |_| rng.gen_range(-0.5..0.5));
    }
    for bn in [&mut u.bn1, &mut u.bn2, &mut u.bn3] {
        bn.scale.iter_mut().for_each(|v| *v = rng.gen_range(0.5..1.5));
        bn.offset.iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
        let r = bn.running.as_mut().expect("zeros() sets running stats");
        r.mean.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        r.var.iter_mut().for_each(|v| *v = rng.gen_range(0.5..2.0));
    }
    u
}

fn fixed_score_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let units: Vec<_> = (0..5).map(|_| random_unit(3, 2, &mut rng)).collect();
    let x = Tensor::from_fn([1, 3, 3, 3], |_| rng.gen_range(-1.0..1.0));
    let r = act_block_forward(&x, &units, ActHalting::Fixed(&[0.1, 0.05, 0.25, 0.9]), 0.01).map_err(fmt_err)?;
    ensure(r.units == 4, || format!("N = {}", r.units))?;
    ensure((r.remainder - 0.6).abs() < 1e-12, || format!("R = {}", r.remainder))?;
    ensure((r.ponder - 4.6).abs() < 1e-12, || format!("rho = {}", r.ponder))?;
    Ok(format!("N={} R={} rho={}", r.units, r.remainder, r.ponder))
}

fn small_spec(rng: &mut ChaCha8Rng, halting: HaltingMode) -> NetworkSpec {
    let blocks = rng.gen_range(1..=3);
    NetworkSpec {
        input_channels: 2,
        stem_width: 4,
        stem_kernel: 3,
        expansion: 2,
        blocks: (0..blocks)
            .map(|k| BlockSpec {
                units: rng.gen_range(1..=4),
                width: 2 + k,
                stride: if k == 0 { 1 } else { 2 },
            })
            .collect(),
        halting,
        epsilon: 0.01,
        tau: 0.0,
        tile: 1,
        classes: 3,
    }
}

/// A random network whose batch norms and halting biases are perturbed so
/// that halting actually engages.
fn random_network(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> Network<f64> {
    let mut net = Network::random(spec, rng).expect("valid spec");
    for p in net.params_mut() {
        let range = match p.kind {
            ParamKind::BnOffset | ParamKind::BnMean => -0.3..0.3,
            ParamKind::BnScale | ParamKind::BnVar => 0.5..1.5,
            ParamKind::HaltingBias => -2.0..0.5,
            _ => continue,
        };
        p.data.iter_mut().for_each(|v| *v = rng.gen_range(range.clone()));
    }
    net
}

fn generalization_chain() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let nets = 60;
    let mut early = 0;
    for i in 0..nets {
        let spec = small_spec(&mut rng, HaltingMode::Sact);
        let mut sact = random_network(&spec, &mut rng);
        let side = rng.gen_range(4..=9);
        let image = Tensor::from_fn([1, side, side, 2], |_| rng.gen_range(-1.0..1.0));

        for block in &mut sact.blocks {
            if let BlockHalting::Sact(h) = &mut block.halting {
                h.iter_mut().for_each(|p| p.spatial.data_mut().fill(0.0));
            }
        }
        let mut act = sact.clone();
        act.spec.halting = HaltingMode::Act;
        for block in &mut act.blocks {
            if let BlockHalting::Sact(h) = &block.halting {
                block.halting = BlockHalting::Act(h.iter().map(|p| p.pooled_part()).collect());
            }
        }
        let s = sact.infer_image(&image).map_err(fmt_err)?;
        let a = act.infer_image(&image).map_err(fmt_err)?;
        ensure(s.logits == a.logits, || format!("net {i}: SACT with zero spatial weights differs from ACT"))?;
        for ((sb, ab), b) in s.blocks.iter().zip(&a.blocks).zip(&spec.blocks) {
            ensure(sb.ponder == ab.ponder, || format!("net {i}: ponder {} vs {}", sb.ponder, ab.ponder))?;
            early += usize::from(ab.mean_units < b.units as f64);
        }

        let mut plain = act.clone();
        plain.spec.halting = HaltingMode::None;
        plain.blocks.iter_mut().for_each(|b| b.halting = BlockHalting::None);
        let pinned: Vec<Vec<f64>> = act.blocks.iter().map(|b| vec![0.0; b.units.len() - 1]).collect();
        let pinned_act = act.infer_image_with(&image, Some(&pinned)).map_err(fmt_err)?;
        let p = plain.infer_image(&image).map_err(fmt_err)?;
        ensure(pinned_act.logits == p.logits, || format!("net {i}: pinned ACT differs from the plain network"))?;
    }
    ensure(early > 0, || "halting never stopped a block early".into())?;
    Ok(format!("{nets} networks bitwise equal, {early} blocks halted early"))
}

fn perforation_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let pairs = 200;
    for i in 0..pairs {
        let c = rng.gen_range(1..=5);
        let unit = random_unit(c, rng.gen_range(1..=4), &mut rng);
        let (h, w) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let density = rng.gen_range(0.0..1.0);
        let flags = (0..h * w).map(|_| rng.gen_bool(density)).collect();
        let mask = ActiveMask::from_flags(h, w, flags).map_err(fmt_err)?;
        let x = Tensor::from_fn([1, h, w, c], |_| rng.gen_range(-1.0..1.0));
        let (got, stats) = perforated_residual_apply_with_stats(&x, &unit, &mask).map_err(fmt_err)?;
        let dense = unit.forward(&x, BnMode::Infer).map_err(fmt_err)?;
        let want = Tensor::from_fn(x.shape(), |[b, y, xx, ch]| {
            if mask.get(y, xx) {
                *dense.at([b, y, xx, ch])
            } else {
                *x.at([b, y, xx, ch])
            }
        });
        ensure(got == want, || format!("pair {i}: perforated output differs from dense-then-copy"))?;
        let active = mask.flags().iter().filter(|&&f| f).count();
        let dilated = dilate_mask(&mask).flags().iter().filter(|&&f| f).count();
        ensure(stats.active_positions == active, || {
            format!("pair {i}: billed {} active positions, mask has {active}", stats.active_positions)
        })?;
        ensure(stats.conv1_positions == dilated, || {
            format!("pair {i}: first 1x1 billed on {} positions, dilated set has {dilated}", stats.conv1_positions)
        })?;
    }
    Ok(format!("{pairs} pairs exact, first 1x1 billed on the dilated set"))
}

fn gradient_suite() -> Outcome {
    let mut checked = 0;
    let mut screened = 0;
    let (mut coords, mut flipped) = (0, 0);
    for seed in 0..20u64 {
        let mode = if seed % 2 == 0 { HaltingMode::Sact } else { HaltingMode::Act };
        let (net, x, y) = toy_problem(seed, mode).map_err(fmt_err)?;
        for tau in [0.0, 0.01] {
            let opts = FdOptions { seed, ..FdOptions::default() };
            let report = network_gradcheck(&net, &x, &y, tau, &opts).map_err(fmt_err)?;
            if let Some(why) = &report.skipped {
                screened += 1;
                eprintln!("  gradient check seed {seed} tau {tau} screened: {why}");
                continue;
            }
            ensure(report.passed(), || format!("seed {seed} tau {tau}:\n{}", report.to_text()))?;
            checked += 1;
            coords += report.entries.iter().map(|e| e.checked).sum::<usize>();
            flipped += report.entries.iter().map(|e| e.skipped).sum::<usize>();
        }
    }
    ensure(checked >= 20, || format!("only {checked} of 40 checks survived screening"))?;
    ponder_gradient_pattern()?;
    Ok(format!(
        "{checked} networks passed, {screened} screened; {coords} coordinates compared, {flipped} skipped for flipping a branch; -1/0 pattern exact"
    ))
}

/// Gradient of the summed ponder cost with respect to each halting score:
/// -1 for scores of units before the halting one, 0 afterwards.
fn ponder_gradient_pattern() -> Result<(), String> {
    let cases: [(&[f64], &[f64]); 2] = [(&[0.1, 0.05, 0.25], &[-1.0, -1.0, -1.0]), (&[0.3, 0.8, 0.1], &[-1.0, 0.0, 0.0])];
    for (scores, want) in cases {
        let mut g = Graph::<f64>::new();
        let mut acc = HaltingAccumulator::new(&mut g, 1, 1, 1, 0.01);
        let hs: Vec<Var> = scores.iter().map(|&h| g.variable(Tensor::full([1, 1, 1, 1], h))).collect();
        for l in 0..=hs.len() {
            if !acc.any_active() {
                break;
            }
            let x = g.constant(Tensor::full([1, 1, 1, 1], l as f64));
            acc.step(&mut g, x, hs.get(l).copied()).map_err(fmt_err)?;
        }
        let (_, ponder) = acc.finish(&mut g).map_err(fmt_err)?;
        let rho = g.sum(ponder);
        let grads = g.backward(rho).map_err(fmt_err)?;
        let got: Vec<f64> = hs.iter().map(|&h| grads.of(h).data()[0]).collect();
        ensure(got == want, || format!("scores {scores:?}: d rho / d h = {got:?}, want {want:?}"))?;
    }
    Ok(())
}

fn saliency_pipeline() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let ramp = Field::new(4, 4, (0..16).map(f64::from).collect()).map_err(fmt_err)?;
    let perfect = auc_judd(&ramp, &[(3, 3)]).map_err(fmt_err)?;
    let flat = auc_judd(&Field::constant(4, 4, 0.3), &[(0, 1), (2, 2)]).map_err(fmt_err)?;
    ensure(perfect == 1.0 && flat == 0.5, || format!("perfect {perfect}, constant {flat}"))?;

    for i in 0..100 {
        let (h, w) = (rng.gen_range(2..=7), rng.gen_range(2..=7));
        let levels = rng.gen_range(2..6);
        let map = Field::new(h, w, (0..h * w).map(|_| f64::from(rng.gen_range(0..levels))).collect()).map_err(fmt_err)?;
        let n = rng.gen_range(1..h * w);
        let mut fix: Vec<(usize, usize)> = (0..n).map(|_| (rng.gen_range(0..h), rng.gen_range(0..w))).collect();
        fix.sort_unstable();
        fix.dedup();
        let pos: Vec<f64> = fix.iter().map(|&(y, x)| map.get(y, x)).collect();
        let neg: Vec<f64> = (0..h * w)
            .filter(|&k| !fix.contains(&(k / w, k % w)))
            .map(|k| map.values[k])
            .collect();
        if neg.is_empty() {
            continue;
        }
        let mut wins = 0.0;
        for &p in &pos {
            for &q in &neg {
                wins += if p > q { 1.0 } else if p == q { 0.5 } else { 0.0 };
            }
        }
        let want = wins / (pos.len() * neg.len()) as f64;
        let got = auc_judd(&map, &fix).map_err(fmt_err)?;
        ensure((got - want).abs() <= 1e-12, || format!("map {i}: auc {got} vs pairwise {want}"))?;
    }

    let params = SaliencyParams { s: 10.0, gamma: 0.005, ..SaliencyParams::default() };
    let raw = Field::new(6, 6, (0..36).map(|_| rng.gen_range(1.0..5.0)).collect()).map_err(fmt_err)?;
    let base = postprocess(&raw, 48, 48, &params).map_err(fmt_err)?;
    for factor in [0.01, 3.0, 250.0] {
        let scaled = Field::new(6, 6, raw.values.iter().map(|v| v * factor).collect()).map_err(fmt_err)?;
        let out = postprocess(&scaled, 48, 48, &params).map_err(fmt_err)?;
        let fixations: Vec<(usize, usize)> = (0..10).map(|_| (rng.gen_range(0..48), rng.gen_range(0..48))).collect();
        let a = auc_judd(&base, &fixations).map_err(fmt_err)?;
        let b = auc_judd(&out, &fixations).map_err(fmt_err)?;
        ensure(ranks(&base.values) == ranks(&out.values) && a == b, || format!("scaling by {factor} changed the ranking"))?;
    }
    Ok("endpoints exact, 100 maps match the pairwise oracle, postprocessing rank invariant".into())
}

/// Orders positions by value with ties merged, after rounding away
/// floating-point noise at 1e-9 relative.
fn ranks(values: &[f64]) -> Vec<usize> {
    let max = values.iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(f64::MIN_POSITIVE);
    let keys: Vec<i64> = values.iter().map(|v| (v / max * 1e9).round() as i64).collect();
    let mut sorted = keys.clone();
    sorted.sort_unstable();
    sorted.dedup();
    keys.iter().map(|k| sorted.binary_search(k).unwrap()).collect()
}

fn baseline_rows() -> Outcome {
    let rows: [([f64; 4], [usize; 4]); 2] = [([2.9, 2.7, 3.3, 3.0], [3, 3, 3, 3]), ([2.3, 3.8, 13.1, 2.7], [2, 4, 13, 3])];
    for (mean, want) in rows {
        let got = derive_baseline_units(&mean, &[3, 4, 23, 3]);
        ensure(got == want, || format!("{mean:?} -> {got:?}, want {want:?}"))?;
    }
    Ok("(3,3,3,3) and (2,4,13,3)".into())
}

fn sact_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sact"))
}

fn run(cmd: &mut Command) -> Result<String, String> {
    let out = cmd.output().map_err(fmt_err)?;
    if !out.status.success() {
        return Err(format!("{cmd:?} failed: {}", String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn sweep_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/sweep.cfg")
}

fn field(report: &str, key: &str) -> Result<f64, String> {
    report
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('\t')))
        .and_then(|v| v.split('\t').next()?.parse().ok())
        .ok_or_else(|| format!("no `{key}` line in:\n{report}"))
}

struct Sweep {
    dir: tempfile::TempDir,
    /// `(seed, tau, accuracy, mean flops)`
    runs: Vec<(u64, f64, f64, f64)>,
}

impl Sweep {
    fn checkpoint(&self, seed: u64, tau: f64) -> PathBuf {
        self.dir.path().join(format!("s{seed}_t{tau}")).join("model.ckpt")
    }

    fn data(&self, name: &str) -> PathBuf {
        self.dir.path().join("data").join(name)
    }
}

fn run_sweep() -> Result<Sweep, String> {
    let dir = tempfile::tempdir().map_err(fmt_err)?;
    let arch = sweep_config();
    let data = dir.path().join("data");
    run(sact_bin().args(["make-data", "--seed", "0", "--resolution", "32"]).arg("--arch").arg(&arch).arg("--out").arg(&data))?;
    let mut runs = Vec::new();
    for seed in TRADEOFF_SEEDS {
        for tau in TRADEOFF_TAUS {
            let out = dir.path().join(format!("s{seed}_t{tau}"));
            run(sact_bin()
                .arg("train")
                .arg("--arch")
                .arg(&arch)
                .arg("--data")
                .arg(data.join("train.sactdata"))
                .arg("--out")
                .arg(&out)
                .args(["--tau", &tau.to_string(), "--seed", &seed.to_string()]))?;
            let report = run(sact_bin()
                .arg("eval")
                .arg("--arch")
                .arg(&arch)
                .arg("--checkpoint")
                .arg(out.join("model.ckpt"))
                .arg("--data")
                .arg(data.join("test.sactdata")))?;
            let (acc, flops) = (field(&report, "accuracy")?, field(&report, "flops")?);
            eprintln!("  seed {seed} tau {tau}: accuracy {acc:.3} flops {flops:.0}");
            runs.push((seed, tau, acc, flops));
        }
    }
    Ok(Sweep { dir, runs })
}

fn tradeoff(sweep: &Result<Sweep, String>) -> Outcome {
    let sweep = sweep.as_ref().map_err(Clone::clone)?;
    let mut problems = Vec::new();
    let mut summary = Vec::new();
    for seed in TRADEOFF_SEEDS {
        let runs: Vec<_> = sweep.runs.iter().filter(|r| r.0 == seed).collect();
        let base_acc = runs[0].2;
        let flops: Vec<f64> = runs[1..].iter().map(|r| r.3).collect();
        if flops.windows(2).any(|w| w[1] > w[0]) {
            problems.push(format!("seed {seed}: flops {flops:?} increase with tau"));
        }
        for r in &runs[1..] {
            if (r.2 - base_acc).abs() > 0.10 {
                problems.push(format!("seed {seed} tau {}: accuracy {:.3} vs {base_acc:.3} at tau 0", r.1, r.2));
            }
        }
        summary.push(format!(
            "seed {seed}: {}",
            runs.iter().map(|r| format!("{:.2}M", r.3 / 1e6)).collect::<Vec<_>>().join(" > ")
        ));
    }
    if problems.is_empty() {
        Ok(summary.join("; "))
    } else {
        Err(problems.join("; "))
    }
}

fn focus_ratio(sweep: &Sweep, seed: u64) -> Result<f64, String> {
    let spec = NetworkSpec::from_config_str(&fs::read_to_string(sweep_config()).map_err(fmt_err)?).map_err(fmt_err)?;
    let ckpt = load_checkpoint(&sweep.checkpoint(seed, 0.005)).map_err(fmt_err)?;
    let mut net = Network::<f32>::zeros(&spec).map_err(fmt_err)?;
    ckpt.apply_to(&mut net, true).map_err(fmt_err)?;
    let test = load_dataset(&sweep.data("test.sactdata")).map_err(fmt_err)?;
    let masks = load_masks(&sweep.data("test.sactmask")).map_err(fmt_err)?;
    let mut ratio = 0.0;
    for i in 0..test.len() {
        let (image, _) = test.batch::<f32>(&[i]);
        let out = net.infer_image(&image).map_err(fmt_err)?;
        let maps: Vec<_> = out.blocks.into_iter().map(|b| b.ponder_map).collect();
        let total = total_ponder_map(&maps).map_err(fmt_err)?;
        let (inside, outside) = masked_means(&total, &masks.masks[i], masks.height, masks.width).map_err(fmt_err)?;
        ratio += inside / outside;
    }
    Ok(ratio / test.len() as f64)
}

/// Judged on the first seed's model; the other seeds are reported only.
fn focus(sweep: &Result<Sweep, String>) -> Outcome {
    let sweep = sweep.as_ref().map_err(Clone::clone)?;
    let ratios = TRADEOFF_SEEDS.iter().map(|&s| focus_ratio(sweep, s)).collect::<Result<Vec<_>, _>>()?;
    let others: Vec<String> = ratios[1..].iter().map(|r| format!("{r:.3}")).collect();
    let detail = format!(
        "inside/outside ponder ratio {:.3} for seed {}, other seeds {}",
        ratios[0],
        TRADEOFF_SEEDS[0],
        others.join(", ")
    );
    if ratios[0] >= 1.1 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(fmt_err)?;
    let d = dir.path();
    let arch = d.join("short.cfg");
    let text = fs::read_to_string(sweep_config()).map_err(fmt_err)?;
    let short: String = text
        .lines()
        .filter(|l| !l.starts_with("train.epochs") && !l.starts_with("data.train_count"))
        .chain(["train.epochs=2", "data.train_count=320"])
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(&arch, short).map_err(fmt_err)?;
    run(sact_bin().args(["make-data", "--seed", "5"]).arg("--arch").arg(&arch).arg("--out").arg(d.join("data")))?;
    let mut outputs = Vec::new();
    for run_id in ["a", "b"] {
        let out = d.join(run_id);
        let stdout = run(sact_bin()
            .arg("train")
            .arg("--arch")
            .arg(&arch)
            .arg("--data")
            .arg(d.join("data/train.sactdata"))
            .arg("--out")
            .arg(&out)
            .args(["--tau", "0.005", "--seed", "3"]))?;
        let ckpt = fs::read(out.join("model.ckpt")).map_err(fmt_err)?;
        let log = fs::read(out.join("metrics.tsv")).map_err(fmt_err)?;
        outputs.push((ckpt, log, stdout));
    }
    ensure(outputs[0].0 == outputs[1].0, || "checkpoints differ".into())?;
    ensure(outputs[0].1 == outputs[1].1, || "metric logs differ".into())?;
    ensure(outputs[0].2 == outputs[1].2, || "console logs differ".into())?;
    Ok(format!("2 runs, checkpoints ({} bytes) and logs bitwise identical", outputs[0].0.len()))
}

fn report(id: usize, name: &str, start: Instant, outcome: Outcome) -> bool {
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("criterion {id:>2} {name}: PASS ({detail}) [{secs:.1}s]");
            true
        }
        Err(detail) => {
            println!("criterion {id:>2} {name}: FAIL ({detail}) [{secs:.1}s]");
            false
        }
    }
}

fn main() -> ExitCode {
    let mut ok = true;
    let quick: [(usize, &str, fn() -> Outcome); 5] = [
        (1, "flops anchors", flops_anchors),
        (2, "fixed-score halting example", fixed_score_oracle),
        (3, "generalization chain", generalization_chain),
        (4, "perforation oracle", perforation_oracle),
        (5, "gradient suite", gradient_suite),
    ];
    for (id, name, check) in quick {
        let t = Instant::now();
        ok &= report(id, name, t, check());
    }

    let t = Instant::now();
    let sweep = run_sweep();
    ok &= report(6, "tau trade-off", t, tradeoff(&sweep));
    let t = Instant::now();
    ok &= report(7, "spatial focus", t, focus(&sweep));

    for (id, name, check) in [(8, "saliency pipeline", saliency_pipeline as fn() -> Outcome), (9, "baseline derivation", baseline_rows)] {
        let t = Instant::now();
        ok &= report(id, name, t, check());
    }
    let t = Instant::now();
    ok &= report(10, "training determinism", t, determinism());

    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
