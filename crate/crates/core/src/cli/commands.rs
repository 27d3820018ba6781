use std::path::PathBuf;

use rand::Rng as _;

use super::config::{BoundKind, BoundsConfig, ExperimentConfig, GradcheckConfig, LevelsetConfig, RegimeConfig, TrainSection};
use super::{Artifacts, Outcome};
use crate::bounds::{
    empirical_sup_distance, euler_bound_general, mlp_bound_explicit, write_bound_csv, BoundReport, EulerBoundInputs,
    MlpBoundInputs,
};
use crate::error::{Error, Result};
use crate::gradients::{fd_gradient, input_gradient};
use crate::io::{load_model, model_to_json_string};
use crate::models::{euler_discretize, integrate_node, OdeMethod, ResNetModel};
use crate::numerics::BoxDomain;
use crate::regimes::{classify_regime, Verdict};
use crate::rng::{derive_seed, rng_for};
use crate::sampling::{autonomous_spec, corpus_model, random_model, MapShape, ModelSampler};
use crate::svg::{render_level_set, Overlay};
use crate::topology::{
    critical_point_search_with, decision_boundary_level, evaluate_grid, label_components, level_components,
    super_tunnel_through_origin, GridDomain, SearchOptions, TunnelVerdict,
};
use crate::training::{accuracy, make_dataset, train_seeds, DatasetKind, Skeleton, TrainConfig};

/// Denominator floor of the gradient-check error: below unit gradient norm the
/// error is absolute, since FD roundoff does not shrink with the gradient.
pub const GRADCHECK_FLOOR: f64 = 1.0;

fn csv_bytes<F: FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> Result<()>>(f: F) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        f(&mut w)?;
        w.flush()?;
    }
    Ok(buf)
}

/// Box used when the config names none: the training domains by dimension.
fn default_domain(n: usize) -> BoxDomain {
    match n {
        2 => BoxDomain { lo: vec![-2.5; 2], hi: vec![2.5; 2] },
        _ => BoxDomain { lo: vec![-1.0; n], hi: vec![1.0; n] },
    }
}

fn domain_from(lo: &Option<Vec<f64>>, hi: &Option<Vec<f64>>, n: usize) -> Result<BoxDomain> {
    match (lo, hi) {
        (Some(l), Some(h)) => {
            let d = BoxDomain::new(l.clone(), h.clone())?;
            if d.dim() != n {
                return Err(Error::InvalidConfig(format!("domain is {}-D, model input is {n}-D", d.dim())));
            }
            Ok(d)
        }
        (None, None) => Ok(default_domain(n)),
        _ => Err(Error::InvalidConfig("give both lo and hi for the domain".into())),
    }
}

fn search_resolution(n: usize) -> usize {
    match n {
        1 => 401,
        2 => 101,
        _ => ((4096f64).powf(1.0 / n as f64).floor() as usize).max(3),
    }
}

pub fn gradcheck(cfg: &mut ExperimentConfig, art: &mut Artifacts) -> Result<Outcome> {
    let gc = cfg.gradcheck.get_or_insert_with(GradcheckConfig::default).clone();
    let seed = *cfg.seed.get_or_insert(0);
    if gc.models == 0 || gc.points == 0 {
        eprintln!("warning: empty gradient-check sweep");
    }
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for i in 0..gc.models {
        let mut rng = rng_for(seed, i as u64);
        let model = corpus_model(&mut rng)?;
        for p in 0..gc.points {
            let x: Vec<f64> = (0..model.n_in()).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let g = input_gradient(&model, &x)?.grad;
            let fd = fd_gradient(&model, &x, gc.h)?;
            let scale = g.norm_inf();
            let err = g.sub(&fd).norm_inf();
            let rel = err / scale.max(GRADCHECK_FLOOR);
            worst = worst.max(rel);
            rows.push((i, p, scale, err, rel));
        }
    }
    let failures = rows.iter().filter(|r| !(r.4 < gc.tol)).count();
    let bytes = csv_bytes(|w| {
        w.write_record(["model", "point", "grad_norm_inf", "abs_err", "rel_err", "pass"])?;
        for (i, p, s, e, r) in &rows {
            let pass = *r < gc.tol;
            w.write_record([i.to_string(), p.to_string(), s.to_string(), e.to_string(), r.to_string(), pass.to_string()])?;
        }
        Ok(())
    })?;
    art.write("gradcheck.csv", &bytes)?;
    let verdict = if failures == 0 { "PASS" } else { "FAIL" };
    println!("gradcheck {verdict}: {} comparisons, max rel err {worst:.3e} (tol {:.1e})", rows.len(), gc.tol);
    let failure = (failures > 0).then(|| Error::PropertyViolation(format!("{failures} gradient comparisons exceed tol {}", gc.tol)));
    Ok(Outcome { seeds: vec![seed], failure })
}

pub fn regime(cfg: &mut ExperimentConfig, model: Option<PathBuf>, search: bool, art: &mut Artifacts) -> Result<Outcome> {
    let rc = cfg.regime.get_or_insert_with(RegimeConfig::default);
    if model.is_some() {
        rc.model = model;
    }
    rc.search |= search;
    let rc = rc.clone();
    let path = rc.model.clone().ok_or_else(|| Error::InvalidConfig("regime needs a model file (--model)".into()))?;
    let m = load_model(&path)?;
    let domain = domain_from(&rc.lo, &rc.hi, m.n_in())?;
    let report = classify_regime(&m, &domain)?;
    let c = &report.constants;
    println!("model {} (ε = {}, δ = {}, α = {})", path.display(), m.eps, m.delta, c.alpha);
    println!("  ν_max = {:.6}  ν_min = {:.6}  K_σ = {}  k_σ = {:.3e}", c.nu_max, c.nu_min, c.k_sigma_upper, c.k_sigma);
    println!("  node-side threshold 1/(ν_max K_σ) = {:.6}", report.thresholds.0);
    println!("  mlp-side threshold 1/(ν_min k_σ) = {:.6e}", report.thresholds.1);
    println!("  verdict: {:?}", report.verdict);
    for n in &report.notes {
        println!("  note: {n}");
    }
    let mut doc = serde_json::json!({ "report": report });
    let mut failure = None;
    if rc.search {
        let res = rc.resolution.unwrap_or_else(|| search_resolution(m.n_in()));
        let g = GridDomain::new(domain.lo.clone(), domain.hi.clone(), vec![res; m.n_in()])?;
        let s = critical_point_search_with(&m, &g, &SearchOptions::default())?;
        println!("  search: found = {} at {:?}, ‖∇Φ‖_∞ = {:.3e}", s.found, s.location, s.grad_norm);
        if s.found && report.verdict != Verdict::Indeterminate {
            failure = Some(Error::PropertyViolation(format!(
                "verdict {:?} contradicted by a critical point at {:?}",
                report.verdict, s.location
            )));
        }
        doc["search"] = serde_json::to_value(&s)?;
    }
    art.write("regime.json", serde_json::to_string_pretty(&doc)?.as_bytes())?;
    Ok(Outcome { seeds: Vec::new(), failure })
}

fn mlp_sampler(rng: &mut crate::rng::Rng, act: crate::models::Activation) -> ModelSampler {
    let n_hid = rng.random_range(1..=2);
    ModelSampler {
        n_in: 2,
        n_hid,
        n_out: 1,
        width: n_hid,
        depth: rng.random_range(1..=5),
        act,
        weight_range: 1.0,
        eps: 0.1,
        delta: rng.random_range(0.5..=1.0),
        input: MapShape::Activated,
        output: MapShape::Activated,
    }
}

pub fn bounds(cfg: &mut ExperimentConfig, kind: Option<&str>, art: &mut Artifacts) -> Result<Outcome> {
    let bc = cfg.bounds.get_or_insert_with(BoundsConfig::default);
    if let Some(k) = kind {
        bc.kind = match k {
            "euler" => BoundKind::Euler,
            "mlp" => BoundKind::Mlp,
            other => return Err(Error::InvalidConfig(format!("unknown bound kind '{other}' (euler|mlp)"))),
        };
    }
    let bc = bc.clone();
    let seed = *cfg.seed.get_or_insert(0);
    let mut reports = Vec::new();
    match bc.kind {
        BoundKind::Euler => {
            if bc.depths.contains(&0) {
                return Err(Error::InvalidConfig("euler depths must be ≥ 1".into()));
            }
            let grid = GridDomain::new(vec![-1.0], vec![1.0], vec![bc.resolution])?;
            for i in 0..bc.instances {
                let mut rng = rng_for(seed, i as u64);
                let n_hid = rng.random_range(1..=3);
                let width = rng.random_range(1..=3);
                let spec = autonomous_spec(&mut rng, 1, n_hid, width, bc.activation)?;
                for &l in &bc.depths {
                    let model = euler_discretize(&spec, l)?;
                    let reference = |x: &[f64]| integrate_node(&spec, x, 10 * l, OdeMethod::Rk4);
                    let net = |x: &[f64]| model.eval(x);
                    let emp = empirical_sup_distance(&net, &reference, &grid)?;
                    let theo = euler_bound_general(&EulerBoundInputs::from_spec(&spec, l)?);
                    reports.push(BoundReport::new("euler", model.delta, l, theo, emp, &grid));
                }
            }
        }
        BoundKind::Mlp => {
            if let Some(e) = bc.eps.iter().find(|&&e| !(e > 0.0 && e < 1.0)) {
                return Err(Error::InvalidConfig(format!("mlp sweep needs 0 < ε < 1, got {e}")));
            }
            let grid = GridDomain::cube(2, -1.0, 1.0, bc.resolution)?;
            for i in 0..bc.instances {
                let mut rng = rng_for(seed, i as u64);
                let sampler = mlp_sampler(&mut rng, bc.activation);
                let base = random_model(&mut rng, &sampler)?;
                let reference = base.to_mlp();
                for &e in &bc.eps {
                    let model = ResNetModel { eps: e, ..base.clone() };
                    let net = |x: &[f64]| model.eval(x);
                    let mlp = |x: &[f64]| reference.eval(x);
                    let emp = empirical_sup_distance(&net, &mlp, &grid)?;
                    let theo = mlp_bound_explicit(&MlpBoundInputs::from_model(&model, &grid.bounds()))?;
                    reports.push(BoundReport::new("mlp", e, model.depth(), theo, emp, &grid));
                }
            }
        }
    }
    let mut buf = Vec::new();
    write_bound_csv(&mut buf, &reports)?;
    art.write("bounds.csv", &buf)?;
    let fails = reports.iter().filter(|r| !r.pass).count();
    println!("bounds {:?}: {} rows, {} violations", bc.kind, reports.len(), fails);
    let failure = (fails > 0).then(|| Error::PropertyViolation(format!("{fails} bound rows with empirical > theoretical")));
    Ok(Outcome { seeds: vec![seed], failure })
}

/// Half-width of the origin neighbourhood for the XOR tunnel signature.
pub const ORIGIN_RADIUS: f64 = 0.5;

/// Resolution of the 1-D curve written per seed.
const CURVE_POINTS: usize = 1001;

pub fn train(cfg: &mut ExperimentConfig, dataset: Option<&str>, art: &mut Artifacts) -> Result<Outcome> {
    let ts = cfg.train.get_or_insert_with(TrainSection::default);
    if let Some(d) = dataset {
        ts.dataset = d.parse::<DatasetKind>()?;
    }
    if let Some(master) = cfg.seed {
        ts.seeds = (0..ts.seeds.len().max(1) as u64).map(|k| derive_seed(master, k)).collect();
    }
    let ts = ts.clone();
    let kind = ts.dataset;
    let n = ts.n_points.unwrap_or(if kind.is_classification() { 1400 } else { 300 });
    let data = make_dataset(kind, n, ts.data_seed)?;
    let skel = Skeleton::for_dataset(kind, ts.eps, ts.delta, ts.depth, ts.n_hid);
    let mut base = match kind {
        DatasetKind::Quad1D => TrainConfig { batch_size: n, ..TrainConfig::quad1d(0) },
        _ => TrainConfig::classification(0, ts.batch_norm),
    };
    base.lr = ts.lr;
    base.batch_norm = ts.batch_norm;
    if let Some(b) = ts.batch_size {
        base.batch_size = b;
    }
    if let Some(e) = ts.epochs {
        base.epochs = e;
    }
    base.validate(n)?;
    let mut buf = Vec::new();
    data.write_csv(&mut buf)?;
    art.write("dataset.csv", &buf)?;

    let results = train_seeds(&skel, &data, &base, &ts.seeds);
    let mut summary: Vec<[String; 9]> = Vec::new();
    for (&seed, res) in ts.seeds.iter().zip(results) {
        let (model, record) = res.map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("seed {seed}: {m}")),
            other => other,
        })?;
        art.write(&format!("model_seed{seed}.json"), model_to_json_string(&model)?.as_bytes())?;
        let mut buf = Vec::new();
        record.write_csv(&mut buf)?;
        art.write(&format!("loss_seed{seed}.csv"), &buf)?;
        let final_loss = record.losses.last().map_or(String::new(), |l| l.to_string());
        if kind.is_classification() {
            let g = GridDomain::cube(2, -2.5, 2.5, ts.resolution)?;
            let values: Vec<f64> = data.inputs.iter().map(|x| model.eval_scalar(x)).collect::<Result<_>>()?;
            let c = decision_boundary_level(&values, &data.labels())?;
            let field = evaluate_grid(&|x: &[f64]| model.eval_scalar(x), &g)?;
            let lab = label_components(&field, &g, c)?;
            let origin_tunnel = super_tunnel_through_origin(&lab, &g, ORIGIN_RADIUS);
            let rep = lab.report;
            let title = format!("{kind:?} seed {seed}, eps {}, delta {}, L {}", ts.eps, ts.delta, ts.depth);
            let labels = data.labels();
            let svg = render_level_set(&field, &g, c, Some(Overlay { points: &data.inputs, labels: &labels }), &title, 480.0)?;
            art.write(&format!("levelset_seed{seed}.svg"), svg.as_bytes())?;
            art.write(&format!("levelset_seed{seed}.json"), serde_json::to_string_pretty(&rep)?.as_bytes())?;
            let bounded_sub = rep.components_sub.iter().filter(|c| c.bounded).count();
            let bounded_super = rep.components_super.iter().filter(|c| c.bounded).count();
            summary.push([
                seed.to_string(),
                final_loss,
                accuracy(&model, &data)?.to_string(),
                c.to_string(),
                format!("{:?}", rep.tunnel_verdict),
                bounded_sub.to_string(),
                bounded_super.to_string(),
                origin_tunnel.to_string(),
                record.sign_flip_fraction.to_string(),
            ]);
            println!("seed {seed}: accuracy {:.4}, c* = {c:.4}, {:?}", record.accuracy.unwrap_or(f64::NAN), rep.tunnel_verdict);
        } else {
            let mut signs = Vec::with_capacity(CURVE_POINTS);
            let bytes = csv_bytes(|w| {
                w.write_record(["x", "phi", "dphi", "target"])?;
                for k in 0..CURVE_POINTS {
                    let x = -1.0 + 2.0 * k as f64 / (CURVE_POINTS - 1) as f64;
                    let phi = model.eval_scalar(&[x])?;
                    let d = input_gradient(&model, &[x])?.grad[0];
                    signs.push(d.signum());
                    w.write_record([x.to_string(), phi.to_string(), d.to_string(), (x * x).to_string()])?;
                }
                Ok(())
            })?;
            art.write(&format!("curve_seed{seed}.csv"), &bytes)?;
            let monotone = signs.windows(2).all(|w| w[0] == w[1]);
            summary.push([
                seed.to_string(),
                final_loss,
                String::new(),
                String::new(),
                if monotone { "Monotone".into() } else { "NonMonotone".into() },
                String::new(),
                String::new(),
                String::new(),
                record.sign_flip_fraction.to_string(),
            ]);
            println!("seed {seed}: final loss {:.6}, sign flips {:.3}", record.losses.last().unwrap_or(&f64::NAN), record.sign_flip_fraction);
        }
    }
    let bytes = csv_bytes(|w| {
        w.write_record(["seed", "final_loss", "accuracy", "c_star", "verdict", "bounded_sub", "bounded_super", "origin_tunnel", "sign_flip_fraction"])?;
        for row in &summary {
            w.write_record(row)?;
        }
        Ok(())
    })?;
    art.write("summary.csv", &bytes)?;
    Ok(Outcome { seeds: ts.seeds.clone(), failure: None })
}

pub fn levelset(
    cfg: &mut ExperimentConfig,
    model: Option<PathBuf>,
    level: Option<f64>,
    resolution: Option<usize>,
    art: &mut Artifacts,
) -> Result<Outcome> {
    let lc = cfg.levelset.get_or_insert_with(LevelsetConfig::default);
    if model.is_some() {
        lc.model = model;
    }
    if level.is_some() {
        lc.level = level;
    }
    if resolution.is_some() {
        lc.resolution = resolution;
    }
    let lc = lc.clone();
    let path = lc.model.clone().ok_or_else(|| Error::InvalidConfig("levelset needs a model file (--model)".into()))?;
    let m = load_model(&path)?;
    let domain = domain_from(&lc.lo, &lc.hi, m.n_in())?;
    let c = lc.level.unwrap_or(0.5);
    let n = m.n_in();
    let res = lc.resolution.unwrap_or(if n <= 2 { 201 } else { 11 });
    let g = GridDomain::new(domain.lo.clone(), domain.hi.clone(), vec![res; n])?;
    let field = evaluate_grid(&|x: &[f64]| m.eval_scalar(x), &g)?;
    if n > 2 {
        println!("{n}-D domain: evaluation only, no component analysis");
        let (lo, hi) = field.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let doc = serde_json::json!({ "level_c": c, "points": field.len(), "min": lo, "max": hi, "evaluation_only": true });
        art.write("levelset.json", serde_json::to_string_pretty(&doc)?.as_bytes())?;
        return Ok(Outcome { seeds: Vec::new(), failure: None });
    }
    let rep = level_components(&field, &g, c)?;
    println!(
        "level {c}: {} sub / {} super components, {:?}",
        rep.components_sub.len(),
        rep.components_super.len(),
        rep.tunnel_verdict
    );
    art.write("levelset.json", serde_json::to_string_pretty(&rep)?.as_bytes())?;
    if n == 2 {
        let svg = render_level_set(&field, &g, c, None, &path.display().to_string(), 480.0)?;
        art.write("levelset.svg", svg.as_bytes())?;
    }
    if rep.tunnel_verdict == TunnelVerdict::Empty {
        println!("note: one side of the level is empty on this grid");
    }
    Ok(Outcome { seeds: Vec::new(), failure: None })
}
