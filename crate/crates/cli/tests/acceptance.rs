//! Acceptance suite: one pass/fail line per criterion, nonzero exit if any
//! criterion fails. `ACCEPTANCE_ONLY=1,4,8` runs a subset.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use edl_ciss::edl::{self, Rectifier};
use edl_ciss::loss::{self, LossConfig, LossParts};
use edl_ciss::metrics::{aggregate, Confusion, MetricsReport};
use edl_ciss::model::{HeadMode, LayerSpec, ModelConfig, SegModel, Teacher};
use edl_ciss::protocol::{
    build_increment, generate_shapes_corpus, ClassId, CorpusConfig, IncrementPlan, Setting, SizeProfile, IGNORE_LABEL,
};
use edl_ciss::tensor::{Tape, Tensor, Var};
use edl_ciss::trainer::run_plan;
use edl_ciss_cli::RunConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(start: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let took = start.elapsed();
    if took < limit {
        Ok(())
    } else {
        Err(format!("{what} took {took:.2?}, limit {limit:?}"))
    }
}

fn pixel(e: &[f64]) -> Tensor {
    Tensor::new(&[1, e.len(), 1, 1], e.to_vec()).unwrap()
}

fn edl_algebra() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k = rng.random_range(1..=20);
        let e: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..100.0)).collect();
        let mut tape = Tape::new();
        let ev = tape.constant(pixel(&e));
        let out = edl::evidential_from_evidence(&mut tape, ev).map_err(|e| e.to_string())?;
        let sum = |v: Var| tape.value(v).data().iter().sum::<f64>();
        let u = sum(out.stats.uncertainty);
        worst = worst
            .max((u + sum(out.stats.belief) - 1.0).abs())
            .max((sum(out.stats.fg_prob) - 1.0).abs())
            .max((sum(out.full_prob) - 1.0).abs());
    }
    within(start, Duration::from_secs(1), "1000 vectors")?;
    check(worst < 1e-9, format!("max normalisation error {worst:.1e} over 1000 vectors"))
}

fn worked_examples() -> Outcome {
    let mut tape = Tape::new();
    let ev = tape.constant(pixel(&[3.0, 1.0]));
    let out = edl::evidential_from_evidence(&mut tape, ev).map_err(|e| e.to_string())?;
    let got = |v: Var| tape.value(v).data().to_vec();
    let expected: [(Vec<f64>, Vec<f64>); 4] = [
        (got(out.stats.uncertainty), vec![1.0 / 3.0]),
        (got(out.stats.belief), vec![0.5, 1.0 / 6.0]),
        (got(out.stats.fg_prob), vec![2.0 / 3.0, 1.0 / 3.0]),
        (got(out.full_prob), vec![1.0 / 3.0, 4.0 / 9.0, 2.0 / 9.0]),
    ];
    let worst = expected
        .iter()
        .flat_map(|(g, w)| g.iter().zip(w).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max);
    check(worst < 1e-12, format!("max deviation {worst:.1e}"))
}

fn increment_balancing() -> Outcome {
    let e = |a, b| edl::increment_scale(a, b).map_err(|e| e.to_string());
    let one = e(20, 20)?;
    let five = (e(5, 20)? - 3600.0 / 975.0).abs();
    let single = (e(1, 20)? - 400.0 / 39.0).abs();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ev = Tensor::new(&[2, 6, 4, 4], (0..192).map(|_| rng.random_range(0.0..9.0)).collect()).unwrap();
    let joint_noop = edl::apply_increment_balancing(&ev, &[6]).map_err(|e| e.to_string())? == ev;
    check(
        one == 1.0 && five < 1e-12 && single < 1e-12 && joint_noop,
        format!("o(20,20)={one}, |o(5,20)-3600/975|={five:.1e}, |o(1,20)-400/39|={single:.1e}, joint no-op {joint_noop}"),
    )
}

struct Targets {
    fg: Tensor,
    u: Tensor,
}

const TOY_LABELS: [u8; 4] = [0, 2, 2, 0];

fn objective(tape: &mut Tape, scores: Var, t: &Targets) -> edl_ciss::Result<Var> {
    let cfg = LossConfig {
        fg_bg_balancing: true,
        ..LossConfig::default()
    };
    let out = edl::evidential_output(tape, scores, Rectifier::ExpSigmoid)?;
    let w = loss::fg_bg_weights(&TOY_LABELS, cfg.weight_clamp)?;
    let new = loss::loss_new(tape, out.full_prob, &TOY_LABELS, &[2], Some(&w), cfg.epsilon)?;
    let kd_fg = loss::loss_kd_fg(tape, out.stats.fg_prob, &t.fg, Some(&TOY_LABELS), false, cfg.epsilon)?;
    let kd_u = loss::loss_kd_u(tape, out.stats.uncertainty, &t.u, Some(&TOY_LABELS), cfg.epsilon)?;
    let parts = LossParts {
        new,
        kd_fg: Some(kd_fg),
        kd_u: Some(kd_u),
    };
    loss::total_loss(tape, 1, parts, &cfg)
}

fn model_objective(model: &SegModel, images: &Tensor, t: &Targets, trainable: bool) -> edl_ciss::Result<(Tape, Var, Vec<Var>)> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, trainable, trainable);
    let x = tape.constant(images.clone());
    let scores = model.forward(&mut tape, &params, x)?;
    let root = objective(&mut tape, scores, t)?;
    let vars = params.vars().to_vec();
    Ok((tape, root, vars))
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let h = 1e-5;
    let err = |e: edl_ciss::Error| e.to_string();
    let cfg = ModelConfig {
        in_channels: 3,
        layers: vec![LayerSpec { channels: 4, stride: 2 }, LayerSpec { channels: 3, stride: 1 }],
        head_mode: HeadMode::EvidentialImplicitBg,
        rectifier: Rectifier::ExpSigmoid,
        head_init_std: 0.5,
    };
    let mut student = SegModel::new(cfg, 9, 1).map_err(err)?;
    let teacher: Teacher = student.snapshot();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for p in student.parameters_mut() {
        p.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
    student.expand_head(1).map_err(err)?;
    let images = Tensor::new(&[1, 3, 2, 2], (0..12).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let mut tt = Tape::new();
    let x = tt.constant(images.clone());
    let (_, t_out) = teacher.forward(&mut tt, x).map_err(err)?;
    let ev = t_out.evidential.ok_or("teacher has no evidential output")?;
    let targets = Targets {
        fg: tt.value(ev.stats.fg_prob).clone(),
        u: tt.value(ev.stats.uncertainty).clone(),
    };

    let mut worst: f64 = 0.0;
    let mut checked = 0usize;

    // with respect to every parameter
    let (mut tape, root, vars) = model_objective(&student, &images, &targets, true).map_err(err)?;
    tape.backward(root).map_err(err)?;
    let grads: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v).expect("trainable")).collect();
    let value = |m: &SegModel| -> Result<f64, String> {
        let (tape, root, _) = model_objective(m, &images, &targets, false).map_err(err)?;
        tape.value(root).item().map_err(err)
    };
    for (i, g) in grads.iter().enumerate() {
        for j in 0..g.numel() {
            let mut plus = student.clone();
            plus.parameters_mut()[i].data_mut()[j] += h;
            let mut minus = student.clone();
            minus.parameters_mut()[i].data_mut()[j] -= h;
            let numeric = (value(&plus)? - value(&minus)?) / (2.0 * h);
            worst = worst.max(rel_err(g.data()[j], numeric));
            checked += 1;
        }
    }

    // with respect to the raw scores
    let mut tape = Tape::new();
    let params = student.bind(&mut tape, false, false);
    let x = tape.constant(images.clone());
    let scores = student.forward(&mut tape, &params, x).map_err(err)?;
    let scores = tape.value(scores).clone();
    let mut tape = Tape::new();
    let s = tape.leaf(scores.clone(), true);
    let root = objective(&mut tape, s, &targets).map_err(err)?;
    tape.backward(root).map_err(err)?;
    let g = tape.grad(s).expect("leaf");
    let at = |t: Tensor| -> Result<f64, String> {
        let mut tape = Tape::new();
        let s = tape.leaf(t, false);
        let root = objective(&mut tape, s, &targets).map_err(err)?;
        tape.value(root).item().map_err(err)
    };
    for j in 0..scores.numel() {
        let mut plus = scores.clone();
        plus.data_mut()[j] += h;
        let mut minus = scores.clone();
        minus.data_mut()[j] -= h;
        let numeric = (at(plus)? - at(minus)?) / (2.0 * h);
        worst = worst.max(rel_err(g.data()[j], numeric));
        checked += 1;
    }
    within(start, Duration::from_secs(10), "gradient check")?;
    check(worst < 1e-4, format!("{checked} partials, max relative error {worst:.2e}"))
}

fn loss_values() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let err = |e: edl_ciss::Error| e.to_string();
    let mut tape = Tape::new();
    let p = tape.constant(pixel(&[0.3, 0.2, 0.5]));
    let ce = loss::loss_new(&mut tape, p, &[2], &[2], None, 1e-12).map_err(err)?;
    let ce = (tape.value(ce).item().map_err(err)? - ln2).abs();
    let u = tape.constant(pixel(&[0.5]));
    let kd_u = loss::loss_kd_u(&mut tape, u, &pixel(&[0.5]), None, 1e-12).map_err(err)?;
    let kd_u = (tape.value(kd_u).item().map_err(err)? - ln2).abs();
    let mut clamp_ok = true;
    for (bg, fg) in [(10usize, 1usize), (50, 3), (1000, 1)] {
        let mut labels = vec![0u8; bg];
        labels.extend(std::iter::repeat_n(1u8, fg));
        let w = loss::fg_bg_weights(&labels, 10.0).map_err(err)?;
        clamp_ok &= w[bg] == 10.0;
    }
    let below = loss::fg_bg_weights(&[0, 0, 0, 0, 1], 10.0).map_err(err)?[4];
    clamp_ok &= below < 10.0;
    check(
        ce < 1e-12 && kd_u < 1e-12 && clamp_ok,
        format!("|CE - ln2| = {ce:.1e}, |KD-u - ln2| = {kd_u:.1e}, clamp exact at bg >= 10/11: {clamp_ok}"),
    )
}

fn protocol_invariants() -> Outcome {
    let start = Instant::now();
    let err = |e: edl_ciss::Error| e.to_string();
    let corpus = generate_shapes_corpus(&CorpusConfig::default()).map_err(err)?;
    let train = corpus.train();
    let order: Vec<ClassId> = (1..=10).collect();
    let mut checks = 0usize;
    for task in ["5-1", "5-5"] {
        let mut sets = Vec::new();
        for setting in [Setting::Overlapped, Setting::Disjoint] {
            let plan = IncrementPlan::from_task(task, order.clone(), setting).map_err(err)?;
            let mut all: Vec<ClassId> = (0..plan.num_increments()).flat_map(|t| plan.increment(t).to_vec()).collect();
            all.sort_unstable();
            if all != order {
                return Err(format!("{task} {setting}: increments are not a partition"));
            }
            let mut steps = Vec::new();
            for t in 0..plan.num_increments() {
                let set = build_increment(&train, &plan, t).map_err(err)?;
                let current = plan.increment(t);
                for s in &set.samples {
                    for &y in s.labels.data() {
                        checks += 1;
                        if !(y == 0 || y == IGNORE_LABEL || current.contains(&y)) {
                            return Err(format!("{task} {setting} step {t}: label {y} in image {}", s.id));
                        }
                    }
                }
                steps.push(set.ids().into_iter().collect::<std::collections::BTreeSet<_>>());
            }
            if setting == Setting::Disjoint {
                for a in 0..steps.len() {
                    for b in a + 1..steps.len() {
                        if !steps[a].is_disjoint(&steps[b]) {
                            return Err(format!("{task} disjoint: steps {a} and {b} share images"));
                        }
                    }
                }
            }
            sets.push(steps);
        }
        for (t, (over, disj)) in sets[0].iter().zip(&sets[1]).enumerate() {
            if !disj.is_subset(over) {
                return Err(format!("{task} step {t}: disjoint set not inside overlapped set"));
            }
        }
    }
    within(start, Duration::from_secs(5), "protocol check")?;
    Ok(format!("{checks} label checks across 5-1 and 5-5, overlapped and disjoint"))
}

fn metrics_examples() -> Outcome {
    let err = |e: edl_ciss::Error| e.to_string();
    let mut c = Confusion::new(2);
    c.accumulate(&[0, 1, 1, 1], &[0, 0, 1, 1]).map_err(err)?;
    let iou = c.iou_per_class();
    let plan = IncrementPlan::new(vec![1, 2, 3], vec![2, 1], Setting::Overlapped, None).map_err(err)?;
    let inc = aggregate(&[Some(0.9), Some(0.8), Some(0.6), Some(0.4)], &plan, 1).map_err(err)?.inc_miou;
    let joint = IncrementPlan::new(vec![1, 2, 3], vec![3], Setting::Joint, None).map_err(err)?;
    let agg = aggregate(&[Some(0.7), Some(0.1), Some(0.4), Some(1.0)], &joint, 0).map_err(err)?;
    let fg_mean = (0.1 + 0.4 + 1.0) / 3.0;
    check(
        iou == vec![Some(0.5), Some(2.0 / 3.0)] && inc == Some(0.55) && agg.inc_miou == Some(fg_mean),
        format!("IoU {iou:?}, inc_miou {inc:?}, joint inc_miou {:?} vs foreground mean {fg_mean}", agg.inc_miou),
    )
}

const SEEDS: [u64; 3] = [42, 1337, 2001];
const RUN_LIMIT: Duration = Duration::from_secs(15 * 60);

fn desk_run(name: &str, seed: u64, edit: impl Fn(&mut RunConfig)) -> Result<MetricsReport, String> {
    let mut cfg = RunConfig::default();
    cfg.set_seed(seed);
    edit(&mut cfg);
    cfg.validate().map_err(|e| format!("{name}: {e:#}"))?;
    let corpus = generate_shapes_corpus(&cfg.corpus).map_err(|e| e.to_string())?;
    let plan = cfg.plan(corpus.num_classes()).map_err(|e| format!("{e:#}"))?;
    let start = Instant::now();
    let outcome = run_plan(&plan, &corpus, &cfg.model, &cfg.train, None).map_err(|e| format!("{name}: {e}"))?;
    let took = start.elapsed();
    let r = outcome.final_report().clone();
    eprintln!(
        "    {name:<22} seed {seed:<5} base {:>6} new {:>6} all {:>6} inc {:>6}  ({took:.0?})",
        pct(r.base),
        pct(r.new),
        pct(r.all),
        pct(r.inc_miou)
    );
    if took > RUN_LIMIT {
        return Err(format!("{name} seed {seed} took {took:.0?}"));
    }
    Ok(r)
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.2}", 100.0 * x))
}

fn val(v: Option<f64>) -> f64 {
    v.unwrap_or(0.0)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn directional() -> Vec<(&'static str, Outcome)> {
    let mut kd = Vec::new();
    let mut ft = Vec::new();
    let mut explicit = Vec::new();
    let mut relu = Vec::new();
    let mut expsig = Vec::new();
    let mut bal_off = Vec::new();
    let mut bal_on = Vec::new();
    let mut failure: Option<String> = None;
    for seed in SEEDS {
        let runs = (|| -> Result<(), String> {
            kd.push(desk_run("5-1 kd=10", seed, |_| {})?);
            ft.push(desk_run("5-1 kd=0", seed, |c| c.train.loss.lambda_kd = 0.0)?);
            explicit.push(desk_run("5-1 explicit softmax", seed, |c| c.model.head_mode = HeadMode::SoftmaxExplicitBg)?);
            let five = |c: &mut RunConfig| c.task = "5-5".into();
            relu.push(desk_run("5-5 relu", seed, |c| {
                five(c);
                c.model.rectifier = Rectifier::Relu;
            })?);
            expsig.push(desk_run("5-5 exp_sigmoid", seed, five)?);
            let imbalanced = |c: &mut RunConfig, on: bool| {
                c.corpus.size_profile = SizeProfile::Imbalanced;
                c.train.loss.fg_bg_balancing = on;
                c.train.increment_balancing = on;
            };
            bal_off.push(desk_run("5-1 imbalanced off", seed, |c| imbalanced(c, false))?);
            bal_on.push(desk_run("5-1 imbalanced on", seed, |c| imbalanced(c, true))?);
            Ok(())
        })();
        if let Err(e) = runs {
            failure = Some(e);
            break;
        }
    }
    if let Some(e) = failure {
        return ["8a", "8b", "8c", "8d"].into_iter().map(|n| (n, Err(e.clone()))).collect();
    }

    let base = |rs: &[MetricsReport]| mean(&rs.iter().map(|r| val(r.base)).collect::<Vec<_>>());
    let (kd_base, ft_base) = (base(&kd), base(&ft));
    let a = check(
        kd_base - ft_base >= 0.05,
        format!("mean base mIoU kd=10 {:.2} vs kd=0 {:.2} (need +5.00)", 100.0 * kd_base, 100.0 * ft_base),
    );

    let wins_b = kd.iter().zip(&explicit).filter(|(e, s)| val(e.inc_miou) >= val(s.inc_miou)).count();
    let b = check(wins_b >= 2, format!("evidential Inc-mIoU >= explicit in {wins_b}/3 seeds"));

    let all = |rs: &[MetricsReport]| mean(&rs.iter().map(|r| val(r.all)).collect::<Vec<_>>());
    let (es, re) = (all(&expsig), all(&relu));
    let c = check(
        es >= re,
        format!("5-5 mean All-mIoU exp_sigmoid {:.2} vs relu {:.2}", 100.0 * es, 100.0 * re),
    );

    let wins_d = bal_off
        .iter()
        .zip(&bal_on)
        .filter(|(off, on)| val(on.all) >= val(off.all) && val(on.inc_miou) > val(off.inc_miou))
        .count();
    let d = check(
        wins_d >= 2,
        format!("balancing keeps All and raises Inc-mIoU in {wins_d}/3 seeds"),
    );
    vec![("8a", a), ("8b", b), ("8c", c), ("8d", d)]
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let dir = tmp.path().join(name);
        let out = Command::new(env!("CARGO_BIN_EXE_edl-ciss"))
            .args(["train", "--task", "5-1", "--seed", "42", "--out"])
            .arg(&dir)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(String::from_utf8_lossy(&out.stderr).into_owned());
        }
        reports.push(std::fs::read(dir.join("final_report.json")).map_err(|e| e.to_string())?);
    }
    check(
        reports[0] == reports[1],
        format!("final_report.json {} bytes, identical: {}", reports[0].len(), reports[0] == reports[1]),
    )
}

fn main() -> ExitCode {
    edl_ciss_cli::tune_allocator();
    let only: Option<Vec<String>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').map(|x| x.trim().to_string()).collect());
    let wanted = |n: &str| only.as_ref().is_none_or(|o| o.iter().any(|x| x == n));
    let mut results: Vec<(String, Outcome)> = Vec::new();
    let mut record = |name: &str, outcome: Outcome| {
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        eprintln!("criterion {name}: {tag} - {detail}");
        results.push((name.to_string(), outcome));
    };
    let simple: [(&str, fn() -> Outcome); 7] = [
        ("1", edl_algebra),
        ("2", worked_examples),
        ("3", increment_balancing),
        ("4", gradient_check),
        ("5", loss_values),
        ("6", protocol_invariants),
        ("7", metrics_examples),
    ];
    for (name, f) in simple {
        if wanted(name) {
            record(name, f());
        }
    }
    if wanted("8") {
        for (name, outcome) in directional() {
            record(name, outcome);
        }
    }
    if wanted("9") {
        record("9", determinism());
    }
    let failed: Vec<&str> = results.iter().filter(|(_, o)| o.is_err()).map(|(n, _)| n.as_str()).collect();
    eprintln!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" ({})", failed.join(", ")) }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
