use std::fmt::Write as _;
use std::path::Path;

use quasimix::data::{load_csv, standardize, Standardization};
use quasimix::gee::{refine, CorrelationKind, RefinedFit};
use quasimix::metrics::ParameterSummary;
use quasimix::sandwich::sandwich_covariance;
use quasimix::selection::{classify, select_lambda, GridSpec, SelectionResult, SelectionSettings};
use quasimix::simulate::{
    generate, generate_test_set, parameter_names, parameter_vector, run_replications, seeds, FitConfig,
    MisclassificationSummary, SimDesign, SimulatedData,
};
use quasimix::{EmSettings, Error, Family, LongitudinalDataset, MixtureFit, Result, Schema};
use serde::{Deserialize, Serialize};

use crate::output::{num, opt, Artifacts, Table};
use crate::{BenchArgs, ClassifyArgs, DataArgs, EmArgs, FitArgs, SelectArgs, SimulateArgs};

const MODEL: &str = "model.json";

/// Everything `classify` needs to reuse a fit.
#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    family: Family,
    id_column: String,
    response_column: String,
    columns: Vec<String>,
    standardization: Option<Standardization>,
    lambda: f64,
    bic: f64,
    fit: MixtureFit,
    refined: Option<RefinedFit>,
}

fn list(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(String::from)
        .collect()
}

fn schema(id: &str, y: &str, x: &[String]) -> Result<Schema> {
    if x.is_empty() {
        return Err(Error::Argument("--x-cols names no columns".into()));
    }
    Ok(Schema {
        id_col: id.into(),
        y_col: y.into(),
        x_cols: x.to_vec(),
    })
}

fn read_data(path: &Path, schema: &Schema) -> Result<LongitudinalDataset> {
    load_csv(path, schema).map_err(|e| match e {
        Error::Io(m) => Error::Io(format!("{}: {m}", path.display())),
        other => other,
    })
}

struct Prepared {
    family: Family,
    data: LongitudinalDataset,
    standardization: Option<Standardization>,
}

fn prepare(args: &DataArgs) -> Result<Prepared> {
    let family: Family = args.family.parse()?;
    let exempt = list(&args.exempt);
    if args.standardize_response && family != Family::Gaussian {
        return Err(Error::Argument("--standardize-response applies to the gaussian family only".into()));
    }
    if !args.standardize && (args.standardize_response || !exempt.is_empty()) {
        return Err(Error::Argument("--standardize-response and --exempt need --standardize".into()));
    }
    let raw = read_data(&args.data, &schema(&args.id_col, &args.y_col, &list(&args.x_cols))?)?;
    let (data, standardization) = if args.standardize {
        let exempt: Vec<&str> = exempt.iter().map(String::as_str).collect();
        let (d, s) = standardize(&raw, args.standardize_response, &exempt)?;
        (d, Some(s))
    } else {
        (raw, None)
    };
    Ok(Prepared {
        family,
        data,
        standardization,
    })
}

fn em_settings(max_iter: usize, tol_obj: f64, tol_param: f64, seed: u64) -> Result<EmSettings> {
    let em = EmSettings {
        max_iter,
        tol_obj,
        tol_param,
        seed,
        ..EmSettings::default()
    };
    em.validate()?;
    Ok(em)
}

fn run_selection(p: &Prepared, em: &EmArgs) -> Result<SelectionResult> {
    let grid_spec = match em.lambda {
        Some(l) => GridSpec::Values(vec![l]),
        None => em.grid.parse()?,
    };
    let grid = grid_spec.resolve(p.data.n(), em.k_init)?;
    let settings = SelectionSettings {
        k_init: em.k_init,
        seed: seeds::derive(em.seed, seeds::INIT),
        em: em_settings(em.max_iter, em.tol_obj, em.tol_param, em.seed)?,
    };
    select_lambda(p.family, &p.data, &grid, &settings)
}

fn parse_refine(s: &str) -> Result<Option<CorrelationKind>> {
    match s {
        "none" => Ok(None),
        other => other.parse().map(Some),
    }
}

fn bic_table(sel: &SelectionResult) -> String {
    let mut t = Table::new(&["lambda", "K", "BIC", "converged"]);
    for r in &sel.table {
        t.row([num(r.lambda), opt(r.k), r.bic.map_or_else(|| "NA".into(), num), r.converged.to_string()]);
    }
    t.finish()
}

fn trace_table(fit: &MixtureFit) -> String {
    let mut t = Table::new(&["iteration", "objective"]);
    for (i, q) in fit.trace.iter().enumerate() {
        t.row([(i + 1).to_string(), num(*q)]);
    }
    t.finish()
}

fn model_json(p: &Prepared, sel: &SelectionResult, refined: Option<RefinedFit>) -> Result<String> {
    let schema = p.data.schema();
    let model = ModelFile {
        family: p.family,
        id_column: schema.id_col,
        response_column: schema.y_col,
        columns: schema.x_cols,
        standardization: p.standardization.clone(),
        lambda: sel.lambda,
        bic: sel.bic,
        fit: sel.fit.clone(),
        refined,
    };
    let mut s = serde_json::to_string_pretty(&model).map_err(|e| Error::Io(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn warn(message: &str) {
    eprintln!("{}", serde_json::json!({ "warning": message }));
}

fn header(p: &Prepared, sel: &SelectionResult) -> String {
    let fit = &sel.fit;
    let mut s = String::new();
    let _ = writeln!(s, "family: {}", p.family);
    let _ = writeln!(
        s,
        "subjects: {}  observations: {}  covariates: {}",
        p.data.n(),
        p.data.total_observations(),
        p.data.columns().join(",")
    );
    if p.standardization.is_some() {
        let _ = writeln!(s, "estimates refer to the standardized data (see model.json)");
    }
    let _ = writeln!(s, "lambda: {}  BIC: {}", sel.lambda, sel.bic);
    let _ = writeln!(
        s,
        "K: {}  (from K_init {})  converged: {}  iterations: {}",
        fit.k(),
        sel.init.k(),
        fit.converged,
        fit.iterations
    );
    s
}

pub fn fit(args: &FitArgs) -> Result<Artifacts> {
    let refine_kind = parse_refine(&args.refine)?;
    let p = prepare(&args.data)?;
    let sel = run_selection(&p, &args.em)?;
    let fit = &sel.fit;
    let (k, dim) = (fit.k(), p.data.p());

    let se = match sandwich_covariance(p.family, &p.data, fit) {
        Ok(cov) => Some(cov),
        Err(e @ Error::NearSingular { .. }) => {
            warn(&format!("standard errors unavailable: {e}"));
            None
        }
        Err(e) => return Err(e),
    };
    let beta_se = |c: usize, j: usize| se.as_ref().map_or(f64::NAN, |s| s.beta_standard_errors(c)[j]);
    let pi_se = se.as_ref().map(|s| s.pi_standard_errors());

    let refined = refine_kind.map(|kind| refine(p.family, &p.data, fit, kind)).transpose()?;

    let mut summary = header(&p, &sel);
    let mut est = Table::new(&["component", "parameter", "estimate", "std_error"]);
    for c in 0..k {
        let pse = pi_se.as_ref().map_or(f64::NAN, |v| v[c]);
        let _ = writeln!(
            summary,
            "\ncomponent {}: pi = {} (se {})  phi = {}",
            c + 1,
            fit.pi[c],
            num(pse),
            fit.phi[c]
        );
        est.row([(c + 1).to_string(), "pi".into(), num(fit.pi[c]), num(pse)]);
        est.row([(c + 1).to_string(), "phi".into(), num(fit.phi[c]), "NA".into()]);
        for j in 0..dim {
            let name = &p.data.columns()[j];
            let _ = writeln!(summary, "  {name}: {} (se {})", fit.beta[c][j], num(beta_se(c, j)));
            est.row([(c + 1).to_string(), name.clone(), num(fit.beta[c][j]), num(beta_se(c, j))]);
        }
    }
    if se.is_none() {
        let _ = writeln!(summary, "\nsandwich covariance is near singular; standard errors are NA");
    }

    let mut post_header = vec![p.data.schema().id_col, "class".into()];
    post_header.extend((1..=k).map(|c| format!("posterior_{c}")));
    let mut post = Table::with_header(post_header);
    for s in p.data.subjects() {
        let cl = classify(p.family, fit, s)?;
        let mut row = vec![s.id().to_string(), (cl.class + 1).to_string()];
        row.extend(cl.posterior.iter().map(|&v| num(v)));
        post.row(row);
    }

    let mut out = Artifacts::default();
    if let Some(r) = &refined {
        let _ = writeln!(summary, "\nrefined ({} working correlation):", r.kind);
        let mut t = Table::new(&["component", "parameter", "estimate"]);
        for c in 0..k {
            let _ = writeln!(summary, "component {}: phi = {}  rho = {}", c + 1, r.phi[c], r.rho[c]);
            t.row([(c + 1).to_string(), "pi".into(), num(r.pi[c])]);
            t.row([(c + 1).to_string(), "phi".into(), num(r.phi[c])]);
            t.row([(c + 1).to_string(), "rho".into(), num(r.rho[c])]);
            for j in 0..dim {
                let name = &p.data.columns()[j];
                let _ = writeln!(summary, "  {name}: {}", r.beta[c][j]);
                t.row([(c + 1).to_string(), name.clone(), num(r.beta[c][j])]);
            }
        }
        out.add("refined.csv", t.finish());
    }

    out.add("summary.txt", summary);
    out.add("estimates.csv", est.finish());
    out.add("posteriors.csv", post.finish());
    out.add("bic_table.csv", bic_table(&sel));
    out.add("trace.csv", trace_table(fit));
    out.add(MODEL, model_json(&p, &sel, refined)?);
    Ok(out)
}

pub fn select(args: &SelectArgs) -> Result<Artifacts> {
    let p = prepare(&args.data)?;
    let sel = run_selection(&p, &args.em)?;
    let mut out = Artifacts::default();
    out.add("summary.txt", header(&p, &sel));
    out.add("bic_table.csv", bic_table(&sel));
    out.add(MODEL, model_json(&p, &sel, None)?);
    Ok(out)
}

pub fn classify_cmd(args: &ClassifyArgs) -> Result<Artifacts> {
    let text = std::fs::read_to_string(&args.model)
        .map_err(|e| Error::Io(format!("{}: {e}", args.model.display())))?;
    let model: ModelFile =
        serde_json::from_str(&text).map_err(|e| Error::InvalidData(format!("model file: {e}")))?;
    let x_cols = args.x_cols.as_deref().map_or_else(|| model.columns.clone(), list);
    let schema = schema(
        args.id_col.as_deref().unwrap_or(&model.id_column),
        args.y_col.as_deref().unwrap_or(&model.response_column),
        &x_cols,
    )?;
    let raw = read_data(&args.data, &schema)?;
    let data = match &model.standardization {
        Some(s) => s.apply(&raw)?,
        None => raw.clone(),
    };
    let fit = if args.refined {
        let r = model
            .refined
            .as_ref()
            .ok_or_else(|| Error::Argument("model has no refined parameters".into()))?;
        MixtureFit::new(r.pi.clone(), r.beta.clone(), r.phi.clone())?
    } else {
        model.fit.clone()
    };
    fit.validate(Some(data.p()))?;

    let k = fit.k();
    let mut header = vec![schema.id_col.clone(), "class".into()];
    header.extend((1..=k).map(|c| format!("posterior_{c}")));
    let mut classes = Table::with_header(header);
    let mut fitted = Table::new(&[&schema.id_col, "visit", &schema.y_col, "fitted"]);
    let (rc, rs) = model
        .standardization
        .as_ref()
        .map_or((0.0, 1.0), |s| (s.response_center, s.response_scale));
    for (s, orig) in data.subjects().iter().zip(raw.subjects()) {
        let cl = classify(model.family, &fit, s)?;
        let mut row = vec![s.id().to_string(), (cl.class + 1).to_string()];
        row.extend(cl.posterior.iter().map(|&v| num(v)));
        classes.row(row);
        for (j, eta) in s.linear_predictor(&fit.beta[cl.class]).into_iter().enumerate() {
            let mu = model.family.inverse_link(eta) * rs + rc;
            fitted.row([s.id().to_string(), (j + 1).to_string(), num(orig.y()[j]), num(mu)]);
        }
    }
    let mut out = Artifacts::default();
    out.add("classes.csv", classes.finish());
    out.add("predictions.csv", fitted.finish());
    Ok(out)
}

fn csv_bytes(data: &LongitudinalDataset) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    data.write_csv(&mut buf)?;
    Ok(buf)
}

fn labels_csv(sim: &SimulatedData) -> String {
    let mut t = Table::new(&[&sim.data.schema().id_col, "class"]);
    for (s, &l) in sim.data.subjects().iter().zip(&sim.labels) {
        t.row([s.id().to_string(), (l + 1).to_string()]);
    }
    t.finish()
}

pub fn simulate(args: &SimulateArgs) -> Result<Artifacts> {
    let design = SimDesign::by_name(&args.example)?;
    if args.reps == 0 {
        return Err(Error::Argument("--reps must be positive".into()));
    }
    let mut out = Artifacts::default();
    let mut truth = Table::new(&["parameter", "true"]);
    let betas: Vec<Vec<f64>> = design.components.iter().map(|c| c.beta.clone()).collect();
    let phis: Vec<f64> = design.components.iter().map(|c| c.dispersion).collect();
    let pis: Vec<f64> = design.components.iter().map(|c| c.pi).collect();
    for (name, v) in parameter_names(design.k(), design.p())
        .iter()
        .zip(parameter_vector(&betas, &phis, &pis))
    {
        truth.row([name.clone(), num(v)]);
    }
    out.add("truth.csv", truth.finish());
    for r in 0..args.reps {
        let suffix = if args.reps == 1 { String::new() } else { format!("_{:04}", r + 1) };
        let seed = seeds::replication(args.seed, r as u64);
        let train = generate(&design, seeds::derive(seed, seeds::TRAIN))?;
        out.add(format!("data{suffix}.csv"), csv_bytes(&train.data)?);
        out.add(format!("labels{suffix}.csv"), labels_csv(&train));
        if args.test_per_component > 0 {
            let test = generate_test_set(&design, args.test_per_component, seeds::derive(seed, seeds::TEST))?;
            out.add(format!("test_data{suffix}.csv"), csv_bytes(&test.data)?);
            out.add(format!("test_labels{suffix}.csv"), labels_csv(&test));
        }
    }
    Ok(out)
}

fn aggregate_rows(t: &mut Table, method: &str, rows: Option<&Vec<ParameterSummary>>) {
    for s in rows.into_iter().flatten() {
        t.row([
            method.to_string(),
            s.name.clone(),
            num(s.truth),
            num(s.mean),
            num(s.bias_x100),
            num(s.mse_x100),
        ]);
    }
}

fn misclass_row(t: &mut Table, method: &str, m: Option<&MisclassificationSummary>) {
    if let Some(m) = m {
        t.row([method.to_string(), num(m.median), num(m.q025), num(m.q975), m.count.to_string()]);
    }
}

pub fn bench(args: &BenchArgs) -> Result<Artifacts> {
    let design = SimDesign::by_name(&args.example)?;
    let reps = if args.full { 1000 } else { args.reps };
    let refine = match args.refine.as_str() {
        "auto" => Some(design.refine_kind()),
        other => parse_refine(other)?,
    };
    let config = FitConfig {
        k_init: args.k_init,
        grid: args.grid.parse()?,
        em: em_settings(args.max_iter, args.tol_obj, args.tol_param, args.seed)?,
        refine,
        test_per_component: args.test_per_component,
    };
    let report = run_replications(&design, reps, &config, args.seed)?;

    let mut agg = Table::new(&["method", "parameter", "true", "mean", "bias_x100", "mse_x100"]);
    aggregate_rows(&mut agg, "PQL", report.pql.as_ref());
    aggregate_rows(&mut agg, "PQL2", report.pql2.as_ref());

    let mut hist = Table::new(&["K", "count", "proportion", "is_true_k"]);
    for &(k, c) in &report.histogram {
        hist.row([k.to_string(), c.to_string(), num(c as f64 / reps as f64), (k == report.k_true).to_string()]);
    }

    let mut mis = Table::new(&["method", "median", "q025", "q975", "count"]);
    misclass_row(&mut mis, "PQL", report.misclassification_pql.as_ref());
    misclass_row(&mut mis, "PQL2", report.misclassification_pql2.as_ref());

    let mut reps_t = Table::new(&[
        "replication",
        "seed",
        "k_hat",
        "lambda",
        "converged",
        "misclassification_pql",
        "misclassification_pql2",
        "achieved_rho",
        "error",
    ]);
    let mut est = Table::new(&["replication", "method", "parameter", "value"]);
    for r in &report.replications {
        reps_t.row([
            (r.index + 1).to_string(),
            r.seed.to_string(),
            opt(r.k_hat),
            r.lambda.map_or_else(|| "NA".into(), num),
            opt(r.converged),
            r.misclassification_pql.map_or_else(|| "NA".into(), num),
            r.misclassification_pql2.map_or_else(|| "NA".into(), num),
            r.achieved_rho.map_or_else(|| "NA".into(), num),
            r.error.clone().unwrap_or_default(),
        ]);
        for (method, values) in [("PQL", &r.pql), ("PQL2", &r.pql2)] {
            let Some(values) = values else { continue };
            for (name, v) in report.parameter_names.iter().zip(values) {
                est.row([(r.index + 1).to_string(), method.to_string(), name.clone(), num(*v)]);
            }
        }
    }

    let mut summary = String::new();
    let _ = writeln!(summary, "design: {}  replications: {reps}  seed: {}", report.design, args.seed);
    let _ = writeln!(
        summary,
        "true K: {}  selection rate: {}  failed replications: {}",
        report.k_true,
        report.selection_rate(),
        report.failures
    );
    if let Some(rho) = report.achieved_rho {
        let _ = writeln!(summary, "mean achieved lag-1 correlation: {rho}");
    }
    for (method, m) in [
        ("PQL", &report.misclassification_pql),
        ("PQL2", &report.misclassification_pql2),
    ] {
        if let Some(m) = m {
            let _ = writeln!(
                summary,
                "{method} misclassification: median {}  2.5% {}  97.5% {}  (n = {})",
                m.median, m.q025, m.q975, m.count
            );
        }
    }

    let mut out = Artifacts::default();
    out.add("summary.txt", summary);
    out.add("aggregate.csv", agg.finish());
    out.add("histogram.csv", hist.finish());
    out.add("misclassification.csv", mis.finish());
    out.add("replications.csv", reps_t.finish());
    out.add("estimates.csv", est.finish());
    Ok(out)
}
