//! End-to-end acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs with `harness = false`; the process exits non-zero if any criterion
//! fails. Trained models and datasets live in a temporary directory shared by
//! the criteria that need them.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tte_cli::{run_text, Command};
use tte_core::attacks::{
    apgd, fgsm, obfuscation_sweep, pgd, robust_accuracy, standard_suite, AttackConfig, AttackKind,
    Batch, RobustReport, SuiteEntry, SweepConfig,
};
use tte_core::certify::{acr, certified_curve, certify, certify_dataset, envelope, radius_grid, SmoothingConfig};
use tte_core::data::Dataset;
use tte_core::gradcheck::{check_gradients, RandomGraph};
use tte_core::model::Linear;
use tte_core::stats::{clopper_pearson_lower, normal_cdf};
use tte_core::train::{evaluate_clean, train, Regime, TrainConfig};
use tte_core::transforms::{enumerate_crops, named_set};
use tte_core::{Architecture, Classifier, EnsembleModel, Model, Tensor, TransformSpec, Transformed};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const EPS: f64 = 8.0 / 255.0;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
/// Test instances used by the attack and certification criteria.
const EVAL: usize = 200;

type Outcome = Result<String, String>;

struct Fixture {
    dir: tempfile::TempDir,
    train: Dataset,
    test: Dataset,
    adversarial: Vec<Classifier>,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().expect("temporary directory");
        run_text(
            Command::Generate,
            "count=3000\nclasses=4\nheight=24\nwidth=24\ntrain_fraction=2/3\nseed=7\n",
            &dir.path().join("data"),
            None,
        )
        .expect("dataset generation");
        let load = |name: &str| Dataset::load(&dir.path().join("data").join(name)).expect("dataset");
        Self {
            train: load("train.tted"),
            test: load("test.tted"),
            dir,
            adversarial: Vec::new(),
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn eval(&self) -> Dataset {
        self.test.head(EVAL)
    }
}

fn fit(data: &Dataset, cfg: &TrainConfig) -> Result<Classifier, String> {
    let [c, h, w] = data.image_dims();
    let mut m = Classifier::init(Architecture::new(c, h, w, data.classes), cfg.seed).map_err(|e| e.to_string())?;
    train(&mut m, data, cfg).map_err(|e| e.to_string())?;
    Ok(m)
}

fn adversarial_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 5,
        ..TrainConfig::new(Regime::adversarial(EPS, 7), seed)
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn pcts(v: &[f64]) -> String {
    v.iter().map(|x| format!("{:.1}", 100.0 * x)).collect::<Vec<_>>().join("/")
}

fn within(elapsed: Duration, limit: f64) -> Result<(), String> {
    if elapsed.as_secs_f64() < limit {
        Ok(())
    } else {
        Err(format!("took {:.1} s, limit {limit} s", elapsed.as_secs_f64()))
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut primitives = std::collections::BTreeSet::new();
    for seed in 0..100 {
        let g = RandomGraph::sample(seed).map_err(e)?;
        let err = check_gradients(&g, 1e-6).map_err(e)?.into_iter().fold(0.0, f64::max);
        check(err <= 1e-4, || format!("graph {seed} {:?}: relative error {err:e}", g.primitives()))?;
        worst = worst.max(err);
        primitives.extend(g.primitives().iter().copied());
    }
    within(start.elapsed(), 30.0)?;
    Ok(format!(
        "100 graphs over {} primitives/transforms, worst relative error {worst:.1e}, {:.1} s",
        primitives.len(),
        start.elapsed().as_secs_f64()
    ))
}

fn identity_equivalence(fx: &Fixture) -> Outcome {
    let m = Classifier::init(Architecture::new(1, 24, 24, 4), 11).map_err(e)?;
    let w = EnsembleModel::wrap(&m, vec![]);
    let data = fx.test.head(50);
    check(w.scores(&data.images).map_err(e)?.bitwise_eq(&m.scores(&data.images).map_err(e)?), || {
        "scores differ".into()
    })?;
    check(w.predict(&data.images).map_err(e)? == m.predict(&data.images).map_err(e)?, || {
        "predictions differ".into()
    })?;
    let (a, b) = (evaluate_clean(&w, &data).map_err(e)?, evaluate_clean(&m, &data).map_err(e)?);
    check(a.to_bits() == b.to_bits(), || format!("clean accuracy {a} vs {b}"))?;
    let cfg = SmoothingConfig {
        n: 200,
        ..SmoothingConfig::new(0.25, 5)
    };
    let data = data.head(10);
    let (x, y) = (certify_dataset(&w, &data, &cfg).map_err(e)?, certify_dataset(&m, &data, &cfg).map_err(e)?);
    check(x == y, || "certification results differ".into())?;
    Ok("scores, predictions, clean accuracy and certificates bitwise equal".into())
}

fn transform_algebra(fx: &Fixture) -> Outcome {
    let x = fx.test.head(16).images;
    let flip = TransformSpec::Flip;
    let twice = flip.apply_tensor(&flip.apply_tensor(&x).map_err(e)?).map_err(e)?;
    check(twice.bitwise_eq(&x), || "flip is not an involution".into())?;
    let centre = TransformSpec::PadCrop { o_x: 4, o_y: 4, pad: 4 };
    check(centre.apply_tensor(&x).map_err(e)?.bitwise_eq(&x), || "centre crop is not the identity".into())?;
    let crops = enumerate_crops(4);
    check(crops.len() == 81, || format!("{} crops", crops.len()))?;
    let flipped = flip.apply_tensor(&x).map_err(e)?;
    for spec in &crops {
        let TransformSpec::PadCrop { o_x, o_y, pad } = *spec else {
            return Err("non-crop spec enumerated".into());
        };
        let lhs = flip.apply_tensor(&spec.apply_tensor(&x).map_err(e)?).map_err(e)?;
        let mirrored = TransformSpec::PadCrop { o_x: 2 * pad - o_x, o_y, pad };
        let rhs = mirrored.apply_tensor(&flipped).map_err(e)?;
        check(lhs.bitwise_eq(&rhs), || format!("flip/crop commutation fails at ({o_x}, {o_y})"))?;
    }
    Ok("involution, centre identity, 81 crops, flip∘crop(o_x) = crop(8−o_x)∘flip — bitwise".into())
}

fn attack_feasibility(fx: &Fixture) -> Outcome {
    let m = &fx.adversarial[0];
    let bt = Batch::from_dataset(&fx.test.head(40));
    let mut runs = 0;
    for eps in [2.0 / 255.0, EPS, 32.0 / 255.0] {
        let suite = [
            SuiteEntry::new("FGSM", AttackKind::Fgsm, AttackConfig::fgsm(eps)),
            SuiteEntry::new("PGD", AttackKind::Pgd, AttackConfig::pgd(eps, 10).with_restarts(2)),
            SuiteEntry::new("APGD-CE", AttackKind::Apgd, AttackConfig::apgd_ce(eps, 20)),
            SuiteEntry::new("APGD-T", AttackKind::Apgd, AttackConfig::apgd_t(eps, 10, 4)),
            SuiteEntry::new("Square", AttackKind::Square, AttackConfig::square(eps, 100)),
        ];
        let tte = EnsembleModel::wrap(m, named_set("flip+1crop", 4, 0).map_err(e)?);
        for entry in &suite {
            for out in [entry.run(m, &bt).map_err(e)?, entry.run(&tte, &bt).map_err(e)?] {
                out.check_feasible(&bt.images, eps).map_err(|err| format!("{}: {err}", entry.name))?;
                let worst = out.adversarial.max_abs_diff(&bt.images);
                check(worst <= eps + 1e-10, || format!("{}: ‖δ‖∞ = {worst}", entry.name))?;
                check(out.adversarial.data().iter().all(|v| (0.0..=1.0).contains(v)), || {
                    format!("{}: pixel outside [0, 1]", entry.name)
                })?;
                runs += 1;
            }
        }
    }
    for seed in 0..3 {
        let p = AttackConfig::pgd(EPS, 20).with_seed(seed);
        let a = AttackConfig::apgd_ce(EPS, 20).with_seed(seed).with_step(p.step_size).without_momentum_or_halving();
        let (x, y) = (pgd(m, &bt, &p).map_err(e)?, apgd(m, &bt, &a).map_err(e)?);
        check(x.adversarial.bitwise_eq(&y.adversarial), || "APGD without momentum/halving differs from PGD".into())?;
    }
    let one = AttackConfig::pgd(EPS, 1).with_step(EPS).without_random_start();
    let (x, y) = (pgd(m, &bt, &one).map_err(e)?, fgsm(m, &bt, &AttackConfig::fgsm(EPS)).map_err(e)?);
    check(x.adversarial.bitwise_eq(&y.adversarial), || "1-step PGD differs from FGSM".into())?;
    Ok(format!("{runs} attack runs feasible; APGD→PGD and PGD→FGSM collapses bitwise"))
}

fn fgsm_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 36;
    let w = Tensor::from_fn(&[d, 2], |_| rng.random_range(-1.0..1.0));
    let m = Linear::new(w.clone(), Tensor::zeros(&[2])).map_err(e)?;
    let x = Tensor::from_fn(&[4, 1, 6, 6], |_| rng.random_range(0.0..1.0));
    let labels = vec![0, 1, 1, 0];
    let bt = Batch::new(x.clone(), labels.clone(), vec![0, 1, 2, 3]).map_err(e)?;
    let eps = 0.07;
    let out = fgsm(&m, &bt, &AttackConfig::fgsm(eps)).map_err(e)?;
    for (i, &y) in labels.iter().enumerate() {
        for p in 0..d {
            // ∂CE/∂x ∝ W[:, other] − W[:, y] for two classes
            let row = w.data()[p * 2 + (1 - y)] - w.data()[p * 2 + y];
            let want = (x.data()[i * d + p] + eps * row.signum()).clamp(0.0, 1.0);
            let got = out.adversarial.data()[i * d + p];
            check(got == want, || format!("instance {i} pixel {p}: {got} vs {want}"))?;
        }
    }
    Ok(format!("{} pixels equal clip(x + ε·sign(w_other − w_label)) exactly", 4 * d))
}

/// `P[Bin(n, p) ≥ k]` from explicit pmf terms, given `ln C(n, j)` for all j.
fn tail_by_sum(k: usize, n: usize, p: f64, ln_choose: &[f64]) -> f64 {
    let (lp, lq) = (p.ln(), (1.0 - p).ln());
    (k..=n).map(|j| (ln_choose[j] + j as f64 * lp + (n - j) as f64 * lq).exp()).sum()
}

fn clopper_pearson_exactness() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut corner: f64 = 0.0;
    let mut pairs = 0;
    for n in 1..=200usize {
        let mut ln_choose = vec![0.0; n + 1];
        for j in 1..=n {
            ln_choose[j] = ln_choose[j - 1] + ((n - j + 1) as f64 / j as f64).ln();
        }
        for alpha in [0.05, 0.01, 0.001] {
            check(clopper_pearson_lower(0, n as u64, alpha).map_err(e)? == 0.0, || format!("k=0, n={n}"))?;
            for k in 1..=n {
                let (mut lo, mut hi) = (0.0f64, 1.0f64);
                while hi - lo > 1e-14 {
                    let mid = 0.5 * (lo + hi);
                    if tail_by_sum(k, n, mid, &ln_choose) < alpha {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let got = clopper_pearson_lower(k as u64, n as u64, alpha).map_err(e)?;
                let err = (got - 0.5 * (lo + hi)).abs();
                check(err <= 1e-9, || format!("k={k} n={n} α={alpha}: off by {err:e}"))?;
                worst = worst.max(err);
                pairs += 1;
            }
            let exact = alpha.powf(1.0 / n as f64);
            let err = (clopper_pearson_lower(n as u64, n as u64, alpha).map_err(e)? - exact).abs();
            check(err <= 1e-12, || format!("k=n={n} α={alpha}: off by {err:e}"))?;
            corner = corner.max(err);
        }
    }
    within(start.elapsed(), 60.0)?;
    Ok(format!(
        "{pairs} (k, n, α) cases, worst {worst:.1e}; k=n corner worst {corner:.1e}; {:.1} s",
        start.elapsed().as_secs_f64()
    ))
}

fn certification_corner() -> Outcome {
    let mut bias = vec![0.0; 4];
    bias[2] = 1.0;
    let m = Linear::new(Tensor::zeros(&[576, 4]), Tensor::new(vec![4], bias).map_err(e)?).map_err(e)?;
    let x = Tensor::full(&[1, 1, 24, 24], 0.5);
    let cfg = SmoothingConfig::new(0.5, 3);
    let r = certify(&m, &x, 2, 0, &cfg).map_err(e)?;
    let pa = 0.001f64.powf(1.0 / 1000.0);
    let (mut lo, mut hi) = (-40.0f64, 40.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf(mid) < pa {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let want = 0.5 * 0.5 * (lo + hi);
    check(r.prediction == Some(2), || format!("prediction {:?}", r.prediction))?;
    check((r.radius - want).abs() <= 1e-6, || format!("R = {} vs {want}", r.radius))?;
    Ok(format!("R = {:.9} vs oracle {want:.9}", r.radius))
}

fn worst_case_aggregation(fx: &Fixture) -> Outcome {
    let m = &fx.adversarial[0];
    let bt = Batch::from_dataset(&fx.test.head(30));
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..20 {
        let eps = rng.random_range(2..=32) as f64 / 255.0;
        let mut pool = vec![
            SuiteEntry::new("FGSM", AttackKind::Fgsm, AttackConfig::fgsm(eps)),
            SuiteEntry::new("PGD", AttackKind::Pgd, AttackConfig::pgd(eps, 5).with_seed(trial)),
            SuiteEntry::new("APGD-CE", AttackKind::Apgd, AttackConfig::apgd_ce(eps, 10).with_seed(trial)),
            SuiteEntry::new("APGD-T", AttackKind::Apgd, AttackConfig::apgd_t(eps, 5, 4).with_seed(trial)),
            SuiteEntry::new("Square", AttackKind::Square, AttackConfig::square(eps, 50).with_seed(trial)),
        ];
        let k = rng.random_range(1..pool.len());
        let suite: Vec<SuiteEntry> = (0..k).map(|_| pool.swap_remove(rng.random_range(0..pool.len()))).collect();
        let r = robust_accuracy(m, &bt, &suite).map_err(e)?;
        let min = r.attacks.iter().map(|a| a.1).fold(f64::INFINITY, f64::min);
        check(r.robust <= min && r.robust <= r.clean, || format!("trial {trial}: robust {} > min {min}", r.robust))?;
        let mut bigger = suite.clone();
        bigger.push(pool[rng.random_range(0..pool.len())].clone());
        let r2 = robust_accuracy(m, &bt, &bigger).map_err(e)?;
        check(r2.robust <= r.robust, || format!("trial {trial}: adding an attack raised robust accuracy"))?;
    }
    Ok("20 randomized suites: robust ≤ min per-attack, monotone under added attacks".into())
}

fn directional_robustness(fx: &mut Fixture) -> Outcome {
    let start = Instant::now();
    let data = fx.eval();
    let bt = Batch::from_dataset(&data);
    let suite = standard_suite(EPS, 50, 500, 4, 0);
    let set = named_set("flip+1crop", 4, 0).map_err(e)?;
    let (mut base, mut tte): (Vec<RobustReport>, Vec<RobustReport>) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        let m = fit(&fx.train, &adversarial_config(seed))?;
        base.push(robust_accuracy(&m, &bt, &suite).map_err(e)?);
        tte.push(robust_accuracy(&EnsembleModel::wrap(&m, set.clone()), &bt, &suite).map_err(e)?);
        fx.adversarial.push(m);
    }
    let elapsed = start.elapsed();
    let robust = |r: &[RobustReport]| r.iter().map(|x| x.robust).collect::<Vec<_>>();
    let clean = |r: &[RobustReport]| r.iter().map(|x| x.clean).collect::<Vec<_>>();
    let (rb, rt) = (mean(&robust(&base)), mean(&robust(&tte)));
    let dclean = 100.0 * (mean(&clean(&tte)) - mean(&clean(&base)));
    let detail = format!(
        "robust base {:.2}% [{}] vs TTE {:.2}% [{}]; clean change {dclean:+.2} pts; {:.0} s",
        100.0 * rb,
        pcts(&robust(&base)),
        100.0 * rt,
        pcts(&robust(&tte)),
        elapsed.as_secs_f64()
    );
    check(rt >= rb, || format!("TTE below base: {detail}"))?;
    check(dclean >= -2.0, || format!("clean accuracy drop: {detail}"))?;
    within(elapsed, 600.0).map_err(|m| format!("{m}; {detail}"))?;
    Ok(detail)
}

fn obfuscation_trends(fx: &Fixture) -> Outcome {
    let m = &fx.adversarial[0];
    let bt = Batch::from_dataset(&fx.eval());
    let sweep = SweepConfig::standard(0);
    let square = SuiteEntry::new("Square", AttackKind::Square, AttackConfig::square(EPS, 1000));
    let tte = EnsembleModel::wrap(m, named_set("flip+4crops+4flipped", 4, 0).map_err(e)?);
    let mut lines = Vec::new();
    for (name, model) in [("base", m as &dyn Model), ("tte", &tte as &dyn Model)] {
        let t = obfuscation_sweep(model, &bt, &sweep).map_err(e)?;
        let by_eps: Vec<f64> = t.by_epsilon.iter().map(|p| p.1).collect();
        let by_it: Vec<f64> = t.by_iterations.iter().map(|p| p.1).collect();
        let desc = format!("{name}: iterations [{}], ε [{}]", pcts(&by_it), pcts(&by_eps));
        check(by_eps.windows(2).all(|w| w[1] <= w[0] + 0.005), || format!("not monotone in ε — {desc}"))?;
        check(by_eps[by_eps.len() - 1] <= 0.01, || format!("above 1% at ε=64/255 — {desc}"))?;
        check(by_it.windows(2).all(|w| w[1] <= w[0] + 0.005), || format!("not monotone in iterations — {desc}"))?;
        let white = by_it[by_it.len() - 1];
        let black = robust_accuracy(model, &bt, std::slice::from_ref(&square)).map_err(e)?.robust;
        check(white <= black, || format!("APGD-CE {white} above Square {black} — {desc}"))?;
        lines.push(format!("{desc}, Square {:.1}", 100.0 * black));
    }
    Ok(lines.join("; "))
}

fn directional_certification(fx: &Fixture) -> Outcome {
    let start = Instant::now();
    let data = fx.eval();
    let grid = radius_grid(2.0, 0.05);
    let flip = vec![TransformSpec::Flip];
    let gaussian = |sigma: f64, seed: u64| TrainConfig::new(Regime::Gaussian { sigma }, seed);
    let non_increasing = |c: &[(f64, f64)]| c.windows(2).all(|w| w[1].1 <= w[0].1);
    let (mut base, mut tte) = (Vec::new(), Vec::new());
    let mut panel = Vec::new();
    for seed in SEEDS {
        let m = fit(&fx.train, &gaussian(0.5, seed))?;
        let cfg = SmoothingConfig::new(0.5, 0);
        let rb = certify_dataset(&m, &data, &cfg).map_err(e)?;
        let rt = certify_dataset(&EnsembleModel::wrap(&m, flip.clone()), &data, &cfg).map_err(e)?;
        for r in [&rb, &rt] {
            let c = certified_curve(r, &grid).map_err(e)?;
            check(non_increasing(&c), || format!("seed {seed}: curve increases"))?;
            if seed == 0 && panel.is_empty() {
                panel.push(c);
            }
        }
        base.push(acr(&rb).map_err(e)?);
        tte.push(acr(&rt).map_err(e)?);
    }
    // σ envelope for seed 0: models trained and certified at each σ
    for sigma in [0.12, 0.25] {
        let m = fit(&fx.train, &gaussian(sigma, 0))?;
        let r = certify_dataset(&m, &data, &SmoothingConfig::new(sigma, 0)).map_err(e)?;
        let c = certified_curve(&r, &grid).map_err(e)?;
        check(non_increasing(&c), || format!("σ={sigma}: curve increases"))?;
        panel.push(c);
    }
    let env = envelope(&panel).map_err(e)?;
    for (i, point) in env.iter().enumerate() {
        let direct = panel.iter().map(|c| c[i].1).fold(f64::MIN, f64::max);
        check(point.1 == direct && panel.iter().all(|c| point.1 >= c[i].1), || {
            format!("envelope wrong at r={}", point.0)
        })?;
    }
    let elapsed = start.elapsed();
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
    let detail = format!(
        "ACR base {:.4} [{}] vs TTE flip {:.4} [{}]; envelope over σ∈{{0.12,0.25,0.5}} ok; {:.0} s",
        mean(&base),
        fmt(&base),
        mean(&tte),
        fmt(&tte),
        elapsed.as_secs_f64()
    );
    check(mean(&tte) >= mean(&base), || format!("TTE ACR below base: {detail}"))?;
    within(elapsed, 300.0).map_err(|m| format!("{m}; {detail}"))?;
    Ok(detail)
}

fn rerun_matches(cmd: Command, out: &Path, again: &Path) -> Result<(), String> {
    let manifest = fs::read_to_string(out.join("manifest.txt")).map_err(e)?;
    run_text(cmd, &manifest, again, None).map_err(|err| format!("{} rerun: {err}", cmd.name()))?;
    let (a, b) = (fs::read(out.join("report.csv")).map_err(e)?, fs::read(again.join("report.csv")).map_err(e)?);
    check(a == b, || format!("{}: report.csv differs after rerun", cmd.name()))
}

fn reproducibility(fx: &Fixture) -> Outcome {
    let ckpt = fx.path("adv0.ckpt");
    fx.adversarial[0].save(&ckpt).map_err(e)?;
    let (ckpt, test) = (ckpt.display().to_string(), fx.path("data/test.tted").display().to_string());
    let small = fx.path("small");
    let (strain, stest) = (small.join("train.tted").display().to_string(), small.join("test.tted").display().to_string());
    let attack = format!("checkpoint={ckpt}\ndataset={test}\nlimit=20\nsteps=5\nsquare_queries=20\n");
    let configs: Vec<(Command, String)> = vec![
        (Command::Generate, "count=200\nheight=16\nwidth=16\nseed=4\n".into()),
        (Command::Train, format!("dataset={strain}\nregime=adversarial\ntrain_epsilon=8/255\ntrain_steps=2\nepochs=1\n")),
        (Command::Attack, attack.clone()),
        (Command::Ablate, attack.replace("limit=20", "limit=8")),
        (Command::Heatmap, attack.clone()),
        (
            Command::Obfuscation,
            format!(
                "checkpoint={ckpt}\ndataset={test}\nlimit=20\niterations=2,4\nepsilons=8/255,64/255\nfixed_iterations=4\nsquare_queries=20\n"
            ),
        ),
        (
            Command::Mismatch,
            format!(
                "variant=no_crop_train\ntrain_dataset={strain}\ntest_dataset={stest}\nregime=nominal\nepochs=1\nlimit=10\nsteps=3\nsquare_queries=10\n"
            ),
        ),
        (Command::Certify, format!("checkpoint={ckpt}\ndataset={test}\nlimit=10\nsigmas=0.25,0.5\nn=100\n")),
    ];
    for (cmd, cfg) in &configs {
        let out = if *cmd == Command::Generate { small.clone() } else { fx.path(cmd.name()) };
        run_text(*cmd, cfg, &out, None).map_err(|err| format!("{}: {err}", cmd.name()))?;
        rerun_matches(*cmd, &out, &fx.path(&format!("{}-rerun", cmd.name())))?;
    }
    Ok(format!("{} commands rerun from manifest.txt with bitwise-equal report.csv", configs.len()))
}

fn heatmap_anchor(fx: &Fixture) -> Outcome {
    // the heatmap run of the reproducibility criterion
    let report = fs::read_to_string(fx.path("heatmap/report.csv")).map_err(e)?;
    let row = |prefix: &str| -> Result<String, String> {
        report
            .lines()
            .find(|l| l.starts_with(prefix))
            .map(|l| l.splitn(4, ',').nth(3).unwrap_or_default().to_string())
            .ok_or_else(|| format!("no `{prefix}` row"))
    };
    let (base, centre) = (row("base,")?, row("crop_only,4,4,")?);
    check(base == centre, || format!("report: base {base} vs centre crop {centre}"))?;
    let cells = report.lines().filter(|l| l.starts_with("crop_only,")).count();
    check(cells == 81, || format!("{cells} crop_only cells"))?;

    let m = &fx.adversarial[0];
    let bt = Batch::from_dataset(&fx.test.head(50));
    let suite = standard_suite(EPS, 20, 100, 4, 0);
    let centre = Transformed::new(m, TransformSpec::PadCrop { o_x: 4, o_y: 4, pad: 4 }).map_err(e)?;
    let (a, b) = (robust_accuracy(m, &bt, &suite).map_err(e)?, robust_accuracy(&centre, &bt, &suite).map_err(e)?);
    check(a == b, || "direct evaluation: centre crop differs from base".into())?;
    Ok(format!(
        "crop_only (4,4) = base (clean,robust = {base}); direct check clean {:.1}% robust {:.1}% identical",
        100.0 * a.clean,
        100.0 * a.robust
    ))
}

fn main() {
    let total = Instant::now();
    let mut fx = Fixture::new();
    let mut failures = 0;
    let mut report = |id: usize, name: &str, started: Instant, outcome: Outcome| {
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id:>2} {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failures += 1;
                println!("FAIL {id:>2} {name}: {detail} [{secs:.1} s]");
            }
        }
    };
    macro_rules! criterion {
        ($id:expr, $name:expr, $body:expr) => {{
            let t = Instant::now();
            let outcome = $body;
            report($id, $name, t, outcome);
        }};
    }
    criterion!(1, "gradient correctness", gradient_correctness());
    criterion!(2, "identity-ensemble equivalence", identity_equivalence(&fx));
    criterion!(3, "transform algebra", transform_algebra(&fx));
    // criteria 4, 8, 10, 12 and 13 reuse the adversarially trained models of 9
    criterion!(9, "directional TTE robustness", directional_robustness(&mut fx));
    if fx.adversarial.is_empty() {
        for (id, name) in [(4, "attack feasibility"), (8, "worst-case aggregation"), (10, "obfuscation trends")] {
            report(id, name, Instant::now(), Err("no adversarially trained model".into()));
        }
    } else {
        criterion!(4, "attack feasibility", attack_feasibility(&fx));
        criterion!(8, "worst-case aggregation", worst_case_aggregation(&fx));
        criterion!(10, "obfuscation trends", obfuscation_trends(&fx));
    }
    criterion!(5, "FGSM analytic oracle", fgsm_oracle());
    criterion!(6, "Clopper-Pearson exactness", clopper_pearson_exactness());
    criterion!(7, "certification corner case", certification_corner());
    criterion!(11, "directional certification", directional_certification(&fx));
    if fx.adversarial.is_empty() {
        for (id, name) in [(12, "reproducibility"), (13, "heatmap identity anchor")] {
            report(id, name, Instant::now(), Err("no adversarially trained model".into()));
        }
    } else {
        criterion!(12, "reproducibility", reproducibility(&fx));
        criterion!(13, "heatmap identity anchor", heatmap_anchor(&fx));
    }
    println!(
        "acceptance: {} of 13 criteria passed in {:.0} s",
        13 - failures,
        total.elapsed().as_secs_f64()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
