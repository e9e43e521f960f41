//! End-to-end acceptance suite. Runs every criterion, prints one PASS/FAIL
//! line each, then runs criteria 1-8 a second time and requires every
//! recorded output (losses, checkpoints, metrics, datasets) to match
//! bit for bit.
//!
//! `TNET_ACCEPTANCE_EPOCHS` overrides the epoch budget of the desk run.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tnet::autograd::{Bound, Tape, Var};
use tnet::blocks::{DualAttention, Rdb, RdbSpec};
use tnet::gradcheck::GradCheck;
use tnet::haze::{
    apply_haze, build_dataset, invert_haze, make_depth, verify_record, write_scenes, DepthKind, SynthConfig,
    DEFAULT_T_MIN, MANIFEST_FILE,
};
use tnet::image::{Domain, ImageBuffer};
use tnet::losses::{
    smooth_l1_pointwise, stage_perceptual, stage_smooth_l1, total_loss, FeatureExtractorSpec, LossConfig,
    PerceptualExtractor,
};
use tnet::metrics::{psnr, ssim};
use tnet::params::ParamStore;
use tnet::stack::{StackConfig, StackOutput, StackTNet};
use tnet::tensor::{Element, Tensor};
use tnet::tnet::{build_tnet, TNetConfig};
use tnet::train::{train, Preset, RunConfig, BEST_CHECKPOINT, LAST_CHECKPOINT, LOG_FILE};

/// Epochs of the desk-scale run. Held-out PSNR clears the 3 dB margin
/// after about four epochs; eight leave headroom.
const DESK_EPOCHS: usize = 8;

type Fallible<T> = Result<T, Box<dyn std::error::Error>>;

/// Byte record of everything a criterion computed, for the rerun check.
#[derive(Default, PartialEq)]
struct Fingerprint(Vec<u8>);

impl Fingerprint {
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_bits().to_le_bytes());
    }

    fn tensor<T: Element>(&mut self, t: &Tensor<T>) {
        for &v in t.data() {
            self.f64(v.to_f64_lossy());
        }
    }

    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(&(b.len() as u64).to_le_bytes());
        self.0.extend_from_slice(b);
    }

    fn file(&mut self, path: &Path) -> Fallible<()> {
        self.bytes(&std::fs::read(path)?);
        Ok(())
    }
}

struct Outcome {
    pass: bool,
    detail: String,
    fingerprint: Fingerprint,
}

fn outcome(pass: bool, detail: String, fingerprint: Fingerprint) -> Fallible<Outcome> {
    Ok(Outcome { pass, detail, fingerprint })
}

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed < Duration::from_secs(limit_s)
}

fn block_identities(_: &Path) -> Fallible<Outcome> {
    let start = Instant::now();
    let mut fp = Fingerprint::default();
    let xt = random(&[2, 16, 8, 8], 1, 1.0).cast::<f32>();

    let rdb = Rdb::new("rdb", RdbSpec::new(16))?;
    let mut store = ParamStore::<f32>::new();
    rdb.init(&mut store, &mut ChaCha8Rng::seed_from_u64(2))?;
    store.zero_where(|_| true);
    let mut tape = Tape::new();
    let p = tape.bind(&store, false);
    let x = tape.constant(xt.clone());
    let y = rdb.forward(&mut tape, &p, x)?;
    let rdb_ok = tape.value(y).bit_eq(&xt);
    fp.tensor(tape.value(y));

    let zero = tape.constant(Tensor::scalar(0.0));
    let pos = tnet::blocks::position_attention(&mut tape, x, zero)?;
    let chan = tnet::blocks::channel_attention(&mut tape, x, zero)?;
    let branches_ok = tape.value(pos.output).bit_eq(&xt) && tape.value(chan.output).bit_eq(&xt);

    let da = DualAttention::new("attn");
    let mut attn = ParamStore::<f32>::new();
    da.init(&mut attn)?;
    let pa = tape.bind(&attn, false);
    let d = da.forward(&mut tape, &pa, x)?;
    let doubled = xt.map(|v| 2.0 * v);
    let dual_ok = tape.value(d).bit_eq(&doubled);
    fp.tensor(tape.value(d));

    let elapsed = start.elapsed();
    outcome(
        rdb_ok && branches_ok && dual_ok && within(elapsed, 10),
        format!("rdb identity {rdb_ok}, gamma=0 branches identity {branches_ok}, dual attention 2x {dual_ok}, {elapsed:.1?}"),
        fp,
    )
}

fn shapes(_: &Path) -> Fallible<Outcome> {
    let start = Instant::now();
    let mut fp = Fingerprint::default();
    let mut failures = Vec::new();
    for m in 2..=4 {
        for n in 1..=3 {
            let cfg = TNetConfig { m, n, ..TNetConfig::default() };
            let (net, store) = build_tnet::<f32>(cfg, (10 * m + n) as u64)?;
            let side = (1 << m) * 4;
            let mut tape = Tape::new();
            let p = tape.bind(&store, false);
            let x = tape.constant(random(&[1, 6, side, side], 3, 1.0).cast());
            let (y, trace) = net.forward_traced(&mut tape, &p, x)?;
            let ch = cfg.level_channels();
            let at = |level: usize| vec![1, ch[level], side >> level, side >> level];
            let mut ok = tape.value(y).shape() == [1, 3, side, side] && tape.value(y).is_finite();
            ok &= trace.encoder.len() == m + 1 && trace.fused.len() == m;
            ok &= trace.encoder.iter().enumerate().all(|(i, &v)| tape.value(v).shape() == at(i));
            ok &= tape.value(trace.bottleneck).shape() == at(m);
            ok &= trace.fused.iter().enumerate().all(|(j, &v)| tape.value(v).shape() == at(m - 1 - j));
            if !ok {
                failures.push(format!("(m={m}, n={n})"));
            }
            fp.tensor(tape.value(y));
        }
    }
    let elapsed = start.elapsed();
    outcome(
        failures.is_empty() && within(elapsed, 60),
        format!("9 configurations, failures {failures:?}, {elapsed:.1?}"),
        fp,
    )
}

/// Gradient check of a loss over named parameters plus extra inputs.
/// Parameter tensors come first in the input list.
fn param_gradcheck<F>(store: &ParamStore<f64>, extra: &[Tensor<f64>], per_input: usize, f: F) -> Fallible<f64>
where
    F: Fn(&mut Tape<f64>, &Bound, &[Var]) -> tnet::Result<Var>,
{
    let names: Vec<String> = store.names().map(String::from).collect();
    let mut inputs: Vec<Tensor<f64>> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
    inputs.extend_from_slice(extra);
    let check = GradCheck {
        max_entries_per_input: per_input,
        ..GradCheck::default()
    };
    let report = check.run(&inputs, |tape, vars| {
        let bound = Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
        f(tape, &bound, &vars[names.len()..])
    })?;
    Ok(report.max_relative_error)
}

/// Smooth scalar probe: squared distance to a fixed random target.
fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> tnet::Result<Var> {
    let target = random(tape.value(y).shape(), seed, 1.0);
    let t = tape.constant(target);
    tape.squared_distance(y, t)
}

fn randomize(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

fn gradients(_: &Path) -> Fallible<Outcome> {
    let start = Instant::now();
    let mut fp = Fingerprint::default();
    let mut errors = Vec::new();

    let rdb = Rdb::new("rdb", RdbSpec { channels: 4, growth: 4, layers: 5 })?;
    let mut store = ParamStore::<f64>::new();
    rdb.init(&mut store, &mut ChaCha8Rng::seed_from_u64(4))?;
    randomize(&mut store, 5, 0.3);
    let x = random(&[2, 4, 5, 5], 6, 1.0);
    errors.push(("rdb", param_gradcheck(&store, &[x], usize::MAX, |t, p, v| {
        let y = rdb.forward(t, p, v[0])?;
        probe(t, y, 7)
    })?));

    let da = DualAttention::new("attn");
    let mut store = ParamStore::<f64>::new();
    da.init(&mut store)?;
    store.set("attn.gamma_pos", Tensor::scalar(0.6))?;
    store.set("attn.gamma_chan", Tensor::scalar(-0.4))?;
    let x = random(&[2, 5, 3, 4], 8, 1.0);
    errors.push(("dual attention", param_gradcheck(&store, &[x], usize::MAX, |t, p, v| {
        let y = da.forward(t, p, v[0])?;
        probe(t, y, 9)
    })?));

    let micro = TNetConfig { m: 2, n: 1, base_channels: 2, ..TNetConfig::default() };
    let (net, mut store) = build_tnet::<f64>(micro, 10)?;
    // Move the attention scales off zero so both branches contribute, and
    // give every conv a small bias: with zero biases some pre-activations
    // are exactly zero and sit on a ReLU kink.
    for name in ["attn.gamma_pos", "attn.gamma_chan"] {
        store.set(name, Tensor::scalar(0.3))?;
    }
    let biases: Vec<String> = store.names().filter(|n| n.ends_with(".bias")).map(String::from).collect();
    for (i, name) in biases.iter().enumerate() {
        let len = store.get(name).ok_or("missing bias")?.numel();
        store.set(name, random(&[len], 100 + i as u64, 0.1))?;
    }
    let x = random(&[1, 6, 8, 8], 11, 1.0);
    errors.push(("micro T-Net", param_gradcheck(&store, &[x], 6, |t, p, v| {
        let y = net.forward(t, p, v[0])?;
        probe(t, y, 12)
    })?));

    let extractor = PerceptualExtractor::<f64>::new(&FeatureExtractorSpec::default())?;
    let cfg = LossConfig { stages: 2, ..LossConfig::default() };
    let gt = random(&[1, 3, 8, 8], 13, 0.9);
    let stages = [random(&[1, 3, 8, 8], 14, 1.0), random(&[1, 3, 8, 8], 15, 1.0)];
    let check = GradCheck::default();
    let report = check.run(&stages, |t, v| {
        let p = extractor.bind(t);
        let g = t.constant(gt.clone());
        let out = StackOutput { per_stage: v.to_vec() };
        Ok(total_loss(t, &extractor, &p, &out, g, &cfg)?.total)
    })?;
    errors.push(("total loss", report.max_relative_error));

    for (_, e) in &errors {
        fp.f64(*e);
    }
    let elapsed = start.elapsed();
    let worst = errors.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let listed: Vec<String> = errors.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    outcome(
        worst < 1e-4 && within(elapsed, 300),
        format!("max relative error: {}, {elapsed:.1?}", listed.join(", ")),
        fp,
    )
}

fn recursion(_: &Path) -> Fallible<Outcome> {
    let mut fp = Fingerprint::default();
    let cfg = TNetConfig::default();
    let shared = |k| StackConfig { stages: k, share_parameters: true };
    let k3 = StackTNet::<f32>::build(cfg, shared(3), 21)?;
    let k1 = StackTNet::with_params(cfg, shared(1), k3.params.clone())?;
    let fresh_k1 = StackTNet::<f32>::build(cfg, shared(1), 21)?;
    let counts_equal = k3.param_count() == k1.param_count() && fresh_k1.param_count() == k3.param_count();

    let hazy = random(&[1, 3, 32, 32], 22, 1.0).cast::<f32>();
    let a = k1.infer(&hazy)?;
    let b = k3.infer(&hazy)?;
    let prefix = b.len() == 3 && b.per_stage[0].bit_eq(&a.per_stage[0]);
    for t in &b.per_stage {
        fp.tensor(t);
    }
    outcome(
        counts_equal && prefix,
        format!(
            "parameters K=1 {} / K=3 {}, stage-1 bit-equal {prefix}",
            k1.param_count(),
            k3.param_count()
        ),
        fp,
    )
}

/// Procedural scenes and the 200-pair desk dataset built from them.
fn desk_dataset(work: &Path) -> tnet::Result<tnet::haze::Manifest> {
    write_scenes(&work.join("scenes"), 200, 96, 11)?;
    build_dataset(&work.join("scenes"), &work.join("data"), &SynthConfig::default())
}

fn haze_oracle(work: &Path) -> Fallible<Outcome> {
    let mut fp = Fingerprint::default();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for s in 0..100u64 {
        let kind = DepthKind::ALL[s as usize % DepthKind::ALL.len()];
        let (w, h) = (rng.gen_range(8..40), rng.gen_range(8..40));
        let clean = ImageBuffer::from_fn(w, h, Domain::Unit, |_, _, _| rng.gen_range(0.0..1.0));
        let depth = make_depth(kind, h, w, 1000 + s)?;
        let beta = rng.gen_range(0.4..1.6);
        let a = rng.gen_range(0.7..1.0);
        let sample = apply_haze(&clean, &depth, beta, a)?;
        let inv = invert_haze(&sample.hazy, &depth, beta, a, DEFAULT_T_MIN)?;
        for (i, (&r, &c)) in inv.clean.data().iter().zip(clean.data()).enumerate() {
            if !inv.flagged[i / 3] {
                worst = worst.max((r - c).abs());
                checked += 1;
            }
        }
        fp.f64(sample.hazy.data().iter().sum());
    }
    fp.f64(worst);

    let manifest = desk_dataset(work)?;
    let mut dataset_worst: f64 = 0.0;
    for rec in &manifest.records {
        dataset_worst = dataset_worst.max(verify_record(&manifest, rec)?);
        fp.file(&manifest.resolve(&rec.hazy_path))?;
        fp.file(&manifest.resolve(&rec.clean_path))?;
    }
    // Records name their source scene by path; the work directory itself
    // differs between runs.
    let text = std::fs::read_to_string(work.join("data").join(MANIFEST_FILE))?;
    fp.bytes(text.replace(&*work.to_string_lossy(), "<work>").as_bytes());
    let bound = 1.0 / 255.0 + 1e-6;
    outcome(
        worst < 1e-6 && dataset_worst <= bound && manifest.len() == 200,
        format!(
            "round trip max error {worst:.1e} over {checked} values; {} dataset pairs re-verify within {dataset_worst:.2e} (bound {bound:.2e})",
            manifest.len()
        ),
        fp,
    )
}

fn loss_values(_: &Path) -> Fallible<Outcome> {
    let mut fp = Fingerprint::default();
    let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
    let pointwise = smooth_l1_pointwise(0.5)? == 0.125 && smooth_l1_pointwise(2.0)? == 1.5;

    let gt = random(&[2, 3, 16, 16], 41, 0.8);
    let offsets = close(stage_smooth_l1(&gt.map(|v| v + 0.5), &gt)?, 0.375)
        && close(stage_smooth_l1(&gt.map(|v| v + 2.0), &gt)?, 4.5);

    // The weighted total against separately computed per-stage terms.
    let extractor = PerceptualExtractor::<f64>::new(&FeatureExtractorSpec::default())?;
    let preds = [random(&[2, 3, 16, 16], 42, 1.0), random(&[2, 3, 16, 16], 43, 1.0)];
    let cfg = LossConfig { lambda: 0.04, stages: 2, ..LossConfig::default() };
    let run = |preds: &[Tensor<f64>]| -> tnet::Result<f64> {
        let mut tape = Tape::new();
        let p = extractor.bind(&mut tape);
        let per_stage = preds.iter().map(|t| tape.constant(t.clone())).collect();
        let g = tape.constant(gt.clone());
        let terms = total_loss(&mut tape, &extractor, &p, &StackOutput { per_stage }, g, &cfg)?;
        Ok(terms.breakdown(&tape).total)
    };
    let mut expected = 0.0;
    for pred in &preds {
        expected += stage_smooth_l1(pred, &gt)? + 0.04 * stage_perceptual(pred, &gt, &extractor)?;
    }
    let total = run(&preds)?;
    let weighted = close(total, expected);

    let perfect = stage_smooth_l1(&gt, &gt)? == 0.0
        && stage_perceptual(&gt, &gt, &extractor)? == 0.0
        && run(&[gt.clone(), gt.clone()])? == 0.0;
    fp.f64(total);
    fp.f64(expected);
    outcome(
        pointwise && offsets && weighted && perfect,
        format!(
            "pointwise {pointwise}, offset closed forms {offsets}, lambda weighting {weighted} ({total:.9} vs {expected:.9}), zero at perfect {perfect}"
        ),
        fp,
    )
}

fn metrics_oracle(_: &Path) -> Fallible<Outcome> {
    let mut fp = Fingerprint::default();
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let gt = ImageBuffer::from_fn(48, 40, Domain::Unit, |_, _, _| rng.gen_range(0.0..0.9));
    let shifted = ImageBuffer::new(48, 40, gt.data().iter().map(|v| v + 0.1).collect(), Domain::Unit)?;
    let db = psnr(&shifted, &gt)?;
    let s = ssim(&gt, &gt)?;
    fp.f64(db);
    fp.f64(s);
    outcome(
        (db - 20.0).abs() <= 1e-3 && (s - 1.0).abs() <= 1e-9,
        format!("+0.1 offset {db:.6} dB, identical SSIM {s:.12}"),
        fp,
    )
}

fn desk_run(work: &Path, epochs: usize, soft_check: bool) -> Fallible<Outcome> {
    let start = Instant::now();
    let mut fp = Fingerprint::default();
    // The same dataset the haze criterion built and verified.
    let manifest = tnet::haze::Manifest::load(&work.join("data"))?;
    let mut cfg = RunConfig::preset(Preset::Desk);
    cfg.train.epochs = epochs;
    let run_dir = work.join("run_k2");
    let out = train(&manifest, &cfg, &run_dir, None)?;
    let eval = out.last_eval.ok_or("no held-out pairs")?;
    for f in [LOG_FILE, LAST_CHECKPOINT, BEST_CHECKPOINT] {
        fp.file(&run_dir.join(f))?;
    }
    fp.f64(eval.psnr_db);
    fp.f64(eval.ssim);
    let gain = eval.psnr_db - eval.hazy_psnr_db;
    let mut detail = format!(
        "K=2 m=4 n=3 base 16, {} epochs on {} held-out pairs: {:.3} dB vs hazy {:.3} dB (+{gain:.3} dB)",
        out.epochs_completed, eval.count, eval.psnr_db, eval.hazy_psnr_db
    );

    if soft_check {
        let mut single = cfg.clone();
        single.set_stages(1);
        let k1 = train(&manifest, &single, &work.join("run_k1"), None)?;
        let k1_db = k1.last_eval.ok_or("no held-out pairs")?.psnr_db;
        let verdict = if eval.psnr_db >= k1_db { "holds" } else { "does not hold" };
        detail.push_str(&format!("; soft check K=2 >= K=1 {verdict} (K=1 {k1_db:.3} dB, not gated)"));
    }
    detail.push_str(&format!(", {:.0?}", start.elapsed()));
    outcome(gain >= 3.0, detail, fp)
}

type Criterion = (&'static str, fn(&Path) -> Fallible<Outcome>);

const CRITERIA: [Criterion; 7] = [
    ("1 block identities", block_identities),
    ("2 shapes", shapes),
    ("3 gradients", gradients),
    ("4 recursion", recursion),
    ("5 haze oracle", haze_oracle),
    ("6 loss values", loss_values),
    ("7 metrics oracle", metrics_oracle),
];

/// One pass over criteria 1-8 in a fresh work directory.
fn pass(epochs: usize, first: bool) -> Vec<(String, Option<Outcome>, String)> {
    let work = tempfile::tempdir().expect("temp dir");
    let mut results = Vec::new();
    let record = |name: String, r: Fallible<Outcome>| match r {
        Ok(o) => {
            let d = o.detail.clone();
            (name, Some(o), d)
        }
        Err(e) => (name, None, format!("error: {e}")),
    };
    for (name, f) in CRITERIA {
        results.push(record(name.to_string(), f(work.path())));
    }
    results.push(record("8 desk-scale training".into(), desk_run(work.path(), epochs, first)));
    results
}

fn main() -> ExitCode {
    // Honour the standard harness's listing probe without running anything.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let epochs = std::env::var("TNET_ACCEPTANCE_EPOCHS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(DESK_EPOCHS);

    let first = pass(epochs, true);
    let mut all_pass = true;
    for (name, o, detail) in &first {
        let ok = o.as_ref().is_some_and(|o| o.pass);
        all_pass &= ok;
        println!("[{}] criterion {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    }

    let second = pass(epochs, false);
    let mismatched: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(a, b)| match (&a.1, &b.1) {
            (Some(x), Some(y)) => x.fingerprint != y.fingerprint,
            _ => true,
        })
        .map(|(a, _)| a.0.as_str())
        .collect();
    let deterministic = mismatched.is_empty();
    all_pass &= deterministic;
    println!(
        "[{}] criterion 9 determinism: second run of criteria 1-8 {}",
        if deterministic { "PASS" } else { "FAIL" },
        if deterministic {
            "reproduced every output bit for bit".to_string()
        } else {
            format!("differs in {mismatched:?}")
        }
    );

    if all_pass {
        println!("acceptance: all 9 criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: FAILED");
        ExitCode::FAILURE
    }
}
