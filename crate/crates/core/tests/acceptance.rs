//! Acceptance run: one pass/fail line per criterion.
//!
//! Runs without the libtest harness so that the desk-scale experiment is
//! trained once and shared by criteria 7 and 8.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;

use pgcam_core::cam::{cam, grad_cam, normalize_map, pg_cam, resize_map, CamOptions, GradSeed, Method, ResizeMode};
use pgcam_core::localizer::{connected_components, evaluate_localization, iobb, BBox, LocEvalConfig, Mask, MethodSpec};
use pgcam_core::models::{Model, ModelConfig, ModelKind};
use pgcam_core::phantom::{write_dataset, Dataset, PhantomConfig, SplitCounts};
use pgcam_core::tensor::Tensor;
use pgcam_core::trainer::{evaluate_classification, ClassMetrics, TrainConfig, TrainHooks, Trainer};

const DESK_ITERS: usize = 1000;
const DESK_SEED: u64 = 0;
/// Grad-CAM seed for the localization comparison.
const LOC_SEED: GradSeed = GradSeed::LogProb;

type Verdict = Result<String, String>;

fn minutes(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn report(id: usize, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Verdict) -> bool {
    let t = Instant::now();
    let verdict = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
        .unwrap_or_else(|p| Err(format!("panicked: {}", panic_text(&p))));
    let took = t.elapsed();
    let verdict = match (verdict, limit) {
        (Ok(d), Some(l)) if took > l => Err(format!("{d}; over the {}s budget", l.as_secs())),
        (v, _) => v,
    };
    let (tag, detail) = match &verdict {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {id} {tag} {name} [{:.1}s]: {detail}", took.as_secs_f64());
    verdict.is_ok()
}

fn panic_text(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_default()
}

fn gradients() -> Verdict {
    let mut worst = ("", 0.0f64);
    for seed in [3, 17] {
        for (name, e) in common::op_gradchecks(seed) {
            if e > worst.1 {
                worst = (name, e);
            }
        }
    }
    let net = common::dcfpn_loss_gradcheck(5, common::PROBES);
    let ok = worst.1 <= common::GRAD_TOL && net <= common::GRAD_TOL;
    check(ok, format!("worst op {} rel {:.2e}; DC-FPN loss rel {net:.2e}", worst.0, worst.1))
}

fn random_model(kind: ModelKind, seed: u64) -> Model<f64> {
    let cfg = ModelConfig {
        input_size: 32,
        base_channels: 4,
        seed,
        ..ModelConfig::default()
    };
    let mut m = Model::build(kind, &cfg).unwrap();
    common::randomize_head(&mut m, seed);
    m
}

fn random_image(seed: u64, size: usize) -> Tensor<f64> {
    common::random_tensor(&mut common::rng(seed), &[1, 1, size, size], 0.0, 1.0)
}

fn gradcam_reduces_to_cam() -> Verdict {
    let mut worst = 0.0f64;
    let mut argmax_ok = true;
    for seed in 0..10 {
        let m = random_model(ModelKind::Baseline, seed);
        let x = random_image(seed + 1000, 32);
        let g = normalize_map(&grad_cam(&m, &x, 1, m.head_scale(), GradSeed::ClassLogit).unwrap());
        let c = normalize_map(&cam(&m, &x, 1).unwrap().relu());
        for (a, b) in g.values().iter().zip(c.values()) {
            worst = worst.max((a - b).abs());
        }
        argmax_ok &= g.argmax() == c.argmax();
    }
    check(worst <= 1e-5 && argmax_ok, format!("max |diff| {worst:.2e}, argmax equal: {argmax_ok}"))
}

fn pgcam_additivity() -> Verdict {
    let mut worst = 0.0f64;
    let opts = CamOptions {
        resize: ResizeMode::Bilinear,
        ..CamOptions::default()
    };
    for seed in 0..10 {
        let m = random_model(ModelKind::Dcfpn, seed);
        let x = random_image(seed + 2000, 32);
        let fused = pg_cam(&m, &x, 1, &[1, 2, 3, 4], &opts).unwrap();
        let mut sum = vec![0.0; 32 * 32];
        for p in 1..=4 {
            let g = grad_cam(&m, &x, 1, p, opts.seed).unwrap();
            let r = resize_map(&g, 32, 32, opts.resize).unwrap();
            for (s, v) in sum.iter_mut().zip(r.values()) {
                *s += v;
            }
        }
        let scale = sum.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
        for (a, b) in fused.values().iter().zip(&sum) {
            worst = worst.max((a - b).abs() / scale);
        }
    }
    check(worst <= 1e-6, format!("max relative deviation {worst:.2e} over 10 inputs"))
}

fn cam_mean_is_logit() -> Verdict {
    let mut worst = 0.0f64;
    for kind in [ModelKind::Baseline, ModelKind::Dcfpn] {
        for seed in 0..5 {
            let m = random_model(kind, seed);
            let x = random_image(seed + 3000, 32);
            let logits = m.predict(&x).unwrap();
            for c in 0..2 {
                let map = cam(&m, &x, c).unwrap();
                let mean = map.values().iter().sum::<f64>() / map.values().len() as f64;
                let got = mean + m.head_bias().data()[c];
                worst = worst.max((got - logits.data()[c]).abs());
            }
        }
    }
    check(worst <= 1e-5, format!("max |mean(CAM) + bias - logit| {worst:.2e}"))
}

fn iobb_and_components() -> Verdict {
    let mut r = common::rng(5);
    let mut mismatches = 0;
    for _ in 0..100 {
        let mut b = || {
            let (x, y) = (r.random_range(0..30u32), r.random_range(0..30u32));
            BBox::new(x, y, x + r.random_range(1..20u32), y + r.random_range(1..20u32)).unwrap()
        };
        let (p, g) = (b(), b());
        let mut inside = 0u64;
        for y in p.y0()..p.y1() {
            for x in p.x0()..p.x1() {
                inside += g.contains_pixel(x, y) as u64;
            }
        }
        let brute = inside as f64 / ((p.x1() - p.x0()) as u64 * (p.y1() - p.y0()) as u64) as f64;
        mismatches += (iobb(&p, &g) != brute) as usize;
    }
    let mut cc_bad = 0;
    for _ in 0..50 {
        let density = r.random_range(0.2..0.7);
        let bits: Vec<bool> = (0..32 * 32).map(|_| r.random_bool(density)).collect();
        let m = Mask::new(32, 32, bits);
        let ours: std::collections::BTreeSet<_> = connected_components(&m)
            .into_iter()
            .map(|c| c.pixels.into_iter().collect())
            .collect();
        cc_bad += (ours != common::flood_fill(&m)) as usize;
    }
    check(
        mismatches == 0 && cc_bad == 0,
        format!("iobb mismatches {mismatches}/100, component mismatches {cc_bad}/50"),
    )
}

fn topology() -> Verdict {
    let extents = |cfg: &ModelConfig| (1..=4).map(|p| cfg.tap_extent(p)).collect::<Vec<_>>();
    let paper = ModelConfig::paper_scale();
    let desk = ModelConfig::default();
    let built = Model::<f32>::build(ModelKind::Dcfpn, &desk).unwrap();
    let x = Tensor::<f32>::zeros([1, 1, 64, 64]);
    let f = built.forward(&x, &[1, 2, 3, 4], pgcam_core::tensor::BnMode::Infer).unwrap();
    let live: Vec<usize> = (1..=4).map(|p| f.tap(p).unwrap().extent).collect();
    let layers = built.conv_layer_count();
    let ok = extents(&paper) == [224, 112, 56, 28] && extents(&desk) == [64, 32, 16, 8] && live == [64, 32, 16, 8] && layers == 22;
    check(
        ok,
        format!("paper {:?}, desk {:?}, forward {live:?}, conv layers {layers}", extents(&paper), extents(&desk)),
    )
}

struct Desk {
    train: Dataset,
    val: Dataset,
    loc: Dataset,
}

fn desk_data(dir: &Path) -> Desk {
    let pc = PhantomConfig {
        prevalence: 0.15,
        seed: DESK_SEED,
        ..PhantomConfig::default()
    };
    let counts = SplitCounts {
        train: 2000,
        val: 400,
        loc: 100,
        loc_prevalence: 1.0,
    };
    let paths = write_dataset(&pc, &counts, dir).unwrap();
    Desk {
        train: Dataset::load(&paths.train).unwrap(),
        val: Dataset::load(&paths.val).unwrap(),
        loc: Dataset::load(&paths.loc).unwrap(),
    }
}

fn desk_train(d: &Desk, kind: ModelKind, dense: bool) -> (Model<f32>, ClassMetrics) {
    let mc = ModelConfig {
        dense,
        seed: DESK_SEED,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        max_iterations: DESK_ITERS,
        seed: DESK_SEED,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(Model::build(kind, &mc).unwrap(), tc).unwrap();
    t.run(&d.train, None, TrainHooks::default()).unwrap();
    let m = evaluate_classification(&t.model, &d.val, 64).unwrap();
    (t.model, m)
}

fn f1_rows(model: &Model<f32>, loc: &Dataset, specs: &[MethodSpec], seed: GradSeed) -> Vec<(String, f64)> {
    let specs: Vec<MethodSpec> = specs
        .iter()
        .cloned()
        .map(|mut s| {
            s.opts.seed = seed;
            s
        })
        .collect();
    evaluate_localization(model, loc, &specs, &LocEvalConfig::default())
        .unwrap()
        .into_iter()
        .map(|r| (r.spec.label(), r.metrics.f1))
        .collect()
}

fn fmt_rows(rows: &[(String, f64)]) -> String {
    rows.iter().map(|(l, f)| format!("{l}={f:.3}")).collect::<Vec<_>>().join(" ")
}

struct DeskOutcome {
    data: Desk,
    dense_val: f64,
}

fn desk_scale(dir: &Path, out: &mut Option<DeskOutcome>) -> Verdict {
    let d = desk_data(dir);
    let (dc, dm) = desk_train(&d, ModelKind::Dcfpn, true);
    let (base, bm) = desk_train(&d, ModelKind::Baseline, true);

    let pg_specs = [
        MethodSpec::new(Method::PgCam, &[1, 2, 3, 4]),
        MethodSpec::new(Method::PgCam, &[1]),
        MethodSpec::new(Method::PgCam, &[1, 4]),
    ];
    let base_specs = [MethodSpec::new(Method::GradCam, &[base.head_scale()]), MethodSpec::new(Method::Cam, &[])];
    let pg = f1_rows(&dc, &d.loc, &pg_specs, LOC_SEED);
    let bl = f1_rows(&base, &d.loc, &base_specs, LOC_SEED);
    let alt = GradSeed::ClassLogit;
    let pg_alt = f1_rows(&dc, &d.loc, &pg_specs, alt);
    let bl_alt = f1_rows(&base, &d.loc, &base_specs, alt);

    let a = dm.accuracy >= 0.90 && dm.recall[1] >= 0.60;
    let (grad, plain) = (bl[0].1, bl[1].1);
    let b = pg.iter().all(|(_, f)| *f > grad) && grad > plain;
    let c = pg[2].1 >= pg[1].1 - 0.02;
    *out = Some(DeskOutcome {
        data: d,
        dense_val: dm.accuracy,
    });
    check(
        a && b && c,
        format!(
            "(a) {} val acc {:.4} tumor recall {:.3}, baseline val acc {:.4}; (b) {}: {} | {}; (c) {}; \
             {:?} seed: {} | {}",
            if a { "ok" } else { "FAILED" },
            dm.accuracy,
            dm.recall[1],
            bm.accuracy,
            if b { "ok" } else { "FAILED" },
            fmt_rows(&pg),
            fmt_rows(&bl),
            if c { "ok" } else { "FAILED" },
            alt,
            fmt_rows(&pg_alt),
            fmt_rows(&bl_alt),
        ),
    )
}

fn dense_ablation(desk: Option<&DeskOutcome>) -> Verdict {
    let desk = desk.ok_or("needs the criterion 7 run")?;
    let dense = desk.dense_val;
    let (_, plain) = desk_train(&desk.data, ModelKind::Dcfpn, false);
    check(
        dense >= plain.accuracy,
        format!("dense on {dense:.4} vs dense off {:.4}", plain.accuracy),
    )
}

fn determinism(dir: &Path) -> Verdict {
    let pc = PhantomConfig {
        image_size: 32,
        prevalence: 0.5,
        ..PhantomConfig::default()
    };
    let data = Dataset::from_phantoms(pgcam_core::phantom::generate_split(&pc, 0, 32, 0.5));
    let mc = ModelConfig {
        input_size: 32,
        base_channels: 4,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        max_iterations: 8,
        batch_size: 4,
        seed: 11,
        ..TrainConfig::default()
    };
    let fresh = || Trainer::new(Model::<f32>::build(ModelKind::Dcfpn, &mc).unwrap(), tc.clone()).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();

    let mut a = fresh();
    a.run(&data, None, TrainHooks::default()).unwrap();
    let mut b = fresh();
    b.run(&data, None, TrainHooks::default()).unwrap();
    let trace = bits(&a.history.loss) == bits(&b.history.loss);

    let path = dir.join("model.pgck");
    a.model.save_checkpoint(&path).unwrap();
    let back = Model::<f32>::load_checkpoint(&path).unwrap();
    let again = dir.join("again.pgck");
    back.save_checkpoint(&again).unwrap();
    let round = back == a.model && std::fs::read(&path).unwrap() == std::fs::read(&again).unwrap();

    let part = dir.join("part.pgck");
    let mut c = fresh();
    c.run(
        &data,
        None,
        TrainHooks {
            stop_after: Some(3),
            ..TrainHooks::default()
        },
    )
    .unwrap();
    c.save(&part).unwrap();
    let mut resumed = Trainer::<f32>::resume(&part, tc.clone()).unwrap();
    resumed.run(&data, None, TrainHooks::default()).unwrap();
    let full = dir.join("full.pgck");
    let done = dir.join("done.pgck");
    a.save(&full).unwrap();
    resumed.save(&done).unwrap();
    let resume = resumed.model == a.model
        && bits(&resumed.history.loss) == bits(&a.history.loss)
        && std::fs::read(&full).unwrap() == std::fs::read(&done).unwrap();
    check(
        trace && round && resume,
        format!("loss trace identical: {trace}; checkpoint round trip exact: {round}; resume identical: {resume}"),
    )
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |id: usize| filter.is_empty() || filter.iter().any(|f| f == &id.to_string());
    let tmp = tempfile::tempdir().unwrap();
    let mut all = true;
    let mut desk = None;
    if wanted(1) {
        all &= report(1, "gradient correctness", Some(minutes(2)), gradients);
    }
    if wanted(2) {
        all &= report(2, "Grad-CAM at the head equals normalized CAM", Some(minutes(1)), gradcam_reduces_to_cam);
    }
    if wanted(3) {
        all &= report(3, "PG-CAM additivity", Some(minutes(1)), pgcam_additivity);
    }
    if wanted(4) {
        all &= report(4, "CAM mean plus bias equals logit", None, cam_mean_is_logit);
    }
    if wanted(5) {
        all &= report(5, "IOBB and connected-component oracles", None, iobb_and_components);
    }
    if wanted(6) {
        all &= report(6, "tap extents and layer count", None, topology);
    }
    if wanted(7) || wanted(8) {
        all &= report(7, "desk-scale end to end", Some(minutes(30)), || {
            desk_scale(&tmp.path().join("desk"), &mut desk)
        });
    }
    if wanted(8) {
        all &= report(8, "dense connection ablation", None, || dense_ablation(desk.as_ref()));
    }
    if wanted(9) {
        all &= report(9, "determinism and persistence", None, || determinism(tmp.path()));
    }
    if !all {
        std::process::exit(1);
    }
}
