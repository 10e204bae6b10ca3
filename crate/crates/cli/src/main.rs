//! `hemibubble`: constants, Kirchhoff-Routh critical points, bubble
//! configurations and expansion checks from the command line.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use hemibubble_core::critical_points::{collect_critical_points, sorted_eigen};
use hemibubble_core::expansion::{calibrate_convention, verify_expansion};
use hemibubble_core::hamiltonian::{eval_f, hess_f};
use hemibubble_core::io::{format_f64, to_json_string};
use hemibubble_core::reduction::{assemble, MEpsParams};
use hemibubble_core::{
    closed_form_constants, compute_constants, ChartConvention, Configuration, CriticalPointReport, CurvatureModel,
    Error, IntegratorSpec, Perturbation, SolverOptions,
};

#[derive(Parser)]
#[command(name = "hemibubble", version, about = "Clustered boundary bubbles on the half-sphere")]
struct Cli {
    /// Also write a JSON run manifest to this path.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Universal constants by quadrature and in closed form.
    Constants {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Critical points of the Kirchhoff-Routh function.
    CriticalPoints {
        #[command(flatten)]
        search: Search,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Bubble ensemble at zero perturbation around a critical point.
    Configure {
        #[command(flatten)]
        search: Search,
        #[arg(long)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        crit_index: usize,
        #[arg(long, default_value_t = 10.0)]
        c: f64,
        #[arg(long, default_value_t = 0.5)]
        mu: f64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Analytic against numeric gradient pairings over an eps series (CSV).
    VerifyExpansion {
        #[command(flatten)]
        search: Search,
        /// Comma-separated eps values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        eps: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        crit_index: usize,
        #[arg(long, default_value_t = 0)]
        bubble: usize,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 0.01)]
        target_rel_err: f64,
        #[command(flatten)]
        chart: Chart,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Single-bubble experiment fixing the chart scales (JSON).
    CalibrateConvention {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Values of F on a two-dimensional affine slice (CSV).
    Landscape {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        m: usize,
        /// JSON with `origin`, `u`, `v` (m points each) and optional
        /// `s_range`, `t_range`.
        #[arg(long, conflicts_with = "through_critical", required_unless_present = "through_critical")]
        plane: Option<PathBuf>,
        /// Slice through this closed-form critical point along the two
        /// Hessian directions of smallest |eigenvalue|.
        #[arg(long)]
        through_critical: Option<usize>,
        /// Half-width of the slice for --through-critical.
        #[arg(long, default_value_t = 0.2)]
        extent: f64,
        /// `N` or `NxM`.
        #[arg(long, default_value = "21")]
        grid: String,
        #[arg(long, default_value_t = 64)]
        seeds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args, Serialize)]
struct Search {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    m: usize,
    #[arg(long, default_value_t = 64)]
    seeds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct Chart {
    /// Normal scale of the local curvature model.
    #[arg(long, default_value_t = -2.0, allow_hyphen_values = true)]
    chart_s: f64,
    /// Tangential scale of the local curvature model.
    #[arg(long, default_value_t = 2.0, allow_hyphen_values = true)]
    chart_t: f64,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    model_path: Option<PathBuf>,
    parameters: BTreeMap<String, Value>,
    output_path: Option<PathBuf>,
}

/// Error classes mapped to exit codes.
#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Regime(anyhow::Error),
    Numerical(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::Regime(_)) => Failure::Regime(e),
            Some(Error::Numerical(_)) => Failure::Numerical(e),
            _ => Failure::Usage(e),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, e) = match f {
                Failure::Usage(e) => (2, e),
                Failure::Regime(e) => (3, e),
                Failure::Numerical(e) => (4, e),
            };
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn load_model(path: &Path) -> anyhow::Result<CurvatureModel> {
    let text = fs::read_to_string(path).with_context(|| format!("reading model {}", path.display()))?;
    Ok(CurvatureModel::from_json(&text).with_context(|| format!("model {}", path.display()))?)
}

fn emit(output: &Option<PathBuf>, text: &str) -> anyhow::Result<()> {
    match output {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn write_manifest(path: &Option<PathBuf>, manifest: RunManifest) -> anyhow::Result<()> {
    if let Some(p) = path {
        fs::write(p, to_json_string(&manifest)?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn params(v: Value) -> BTreeMap<String, Value> {
    match v {
        Value::Object(map) => map.into_iter().collect(),
        _ => BTreeMap::new(),
    }
}

fn critical_points(search: &Search, model: &CurvatureModel) -> Result<Vec<CriticalPointReport>, Failure> {
    if search.m < 2 {
        return Err(Failure::Usage(anyhow!("--m must be at least 2")));
    }
    Ok(collect_critical_points(model, search.m, search.seeds, search.seed, &SolverOptions::default())?)
}

fn pick(list: Vec<CriticalPointReport>, index: usize) -> Result<CriticalPointReport, Failure> {
    let len = list.len();
    list.into_iter().nth(index).ok_or_else(|| {
        Failure::Usage(anyhow!("critical point index {index} out of range: {len} critical points found"))
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Constants { n, output } => {
            let quad = compute_constants(n)?;
            let closed = closed_form_constants(n)?;
            let diffs = quad.rel_diffs(&closed);
            let max = diffs.iter().cloned().fold(0.0, f64::max);
            let doc = json!({
                "n": n,
                "cbar": closed.cbar,
                "quadrature": quad,
                "closed_form": closed,
                "rel_diffs": {"S_n": diffs[0], "c2": diffs[1], "c3": diffs[2], "c4": diffs[3], "c5": diffs[4]},
                "max_rel_diff": max,
            });
            write_manifest(
                &cli.manifest,
                RunManifest {
                    command: "constants".into(),
                    model_path: None,
                    parameters: params(json!({ "n": n })),
                    output_path: output.clone(),
                },
            )?;
            emit(&output, &to_json_string(&doc).map_err(anyhow::Error::from)?)?;
        }
        Command::CriticalPoints { search, output } => {
            let model = load_model(&search.model)?;
            let list = critical_points(&search, &model)?;
            let note = if list.is_empty() {
                let (vals, _) = sorted_eigen(&model.hess_k1);
                if vals.iter().all(|v| *v <= 0.0) {
                    Some("no critical points: with hessK1 negative semidefinite z is a local maximum of K on the boundary and F has no critical point")
                } else {
                    Some("no critical points found from the given seeds")
                }
            } else {
                None
            };
            let doc = json!({ "m": search.m, "critical_points": list, "note": note });
            write_manifest(
                &cli.manifest,
                RunManifest {
                    command: "critical-points".into(),
                    model_path: Some(search.model.clone()),
                    parameters: params(serde_json::to_value(&search).map_err(anyhow::Error::from)?),
                    output_path: output.clone(),
                },
            )?;
            emit(&output, &to_json_string(&doc).map_err(anyhow::Error::from)?)?;
        }
        Command::Configure {
            search,
            eps,
            crit_index,
            c,
            mu,
            output,
        } => {
            if !(eps > 0.0 && eps < 1.0) {
                return Err(Failure::Usage(anyhow!("--eps must lie in (0, 1)")));
            }
            let model = load_model(&search.model)?;
            let k = closed_form_constants(model.n)?;
            // regime conditions do not depend on the critical point
            hemibubble_core::reduction::balance_ratio(&model, &k)?;
            let crit = pick(critical_points(&search, &model)?, crit_index)?;
            let asm = assemble(
                &model,
                &k,
                &crit.cfg,
                eps,
                &Perturbation::zero(search.m, model.dim()),
                &MEpsParams { c, mu },
            )?;
            let inv: Vec<f64> = asm.ensemble.bubbles.iter().map(|b| 1.0 / b.lambda / eps).collect();
            let doc = json!({
                "ensemble": asm.ensemble,
                "gamma": asm.gamma,
                "check_M_eps": asm.m_eps.ok,
                "m_eps": asm.m_eps,
                "inv_lambda_over_eps": inv,
                "critical_point": crit,
            });
            let mut p = params(serde_json::to_value(&search).map_err(anyhow::Error::from)?);
            p.insert("eps".into(), json!(eps));
            p.insert("crit_index".into(), json!(crit_index));
            p.insert("C".into(), json!(c));
            p.insert("mu".into(), json!(mu));
            write_manifest(
                &cli.manifest,
                RunManifest {
                    command: "configure".into(),
                    model_path: Some(search.model.clone()),
                    parameters: p,
                    output_path: output.clone(),
                },
            )?;
            emit(&output, &to_json_string(&doc).map_err(anyhow::Error::from)?)?;
        }
        Command::VerifyExpansion {
            search,
            eps,
            crit_index,
            bubble,
            samples,
            target_rel_err,
            chart,
            output,
        } => {
            if eps.is_empty() {
                return Err(Failure::Usage(anyhow!("--eps needs at least one value")));
            }
            if eps.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
                return Err(Failure::Usage(anyhow!("every eps must lie in (0, 1)")));
            }
            if bubble >= search.m {
                return Err(Failure::Usage(anyhow!("--bubble must be below --m")));
            }
            let spec = IntegratorSpec {
                samples,
                seed: search.seed,
                target_rel_err,
                ..IntegratorSpec::default()
            };
            spec.validate()?;
            let model = load_model(&search.model)?;
            let k = closed_form_constants(model.n)?;
            hemibubble_core::reduction::balance_ratio(&model, &k)?;
            let crit = pick(critical_points(&search, &model)?, crit_index)?;
            let conv = ChartConvention {
                s: chart.chart_s,
                t: chart.chart_t,
            };
            let table = verify_expansion(&model, &k, &crit.cfg, &eps, bubble, &spec, &conv)?;
            let csv = expansion_csv(&table).map_err(anyhow::Error::from)?;
            let mut p = params(serde_json::to_value(&search).map_err(anyhow::Error::from)?);
            p.insert("eps".into(), json!(eps));
            p.insert("samples".into(), json!(samples));
            p.insert("crit_index".into(), json!(crit_index));
            p.insert("bubble".into(), json!(bubble));
            p.insert("target_rel_err".into(), json!(target_rel_err));
            p.insert("chart".into(), serde_json::to_value(&chart).map_err(anyhow::Error::from)?);
            write_manifest(
                &cli.manifest,
                RunManifest {
                    command: "verify-expansion".into(),
                    model_path: Some(search.model.clone()),
                    parameters: p,
                    output_path: output.clone(),
                },
            )?;
            emit(&output, &csv)?;
        }
        Command::CalibrateConvention {
            model: path,
            samples,
            seed,
            output,
        } => {
            let spec = IntegratorSpec {
                samples,
                seed,
                ..IntegratorSpec::default()
            };
            spec.validate()?;
            let model = load_model(&path)?;
            let k = closed_form_constants(model.n)?;
            let rep = calibrate_convention(&model, &k, &spec)?;
            write_manifest(
                &cli.manifest,
                RunManifest {
                    command: "calibrate-convention".into(),
                    model_path: Some(path.clone()),
                    parameters: params(json!({ "samples": samples, "seed": seed })),
                    output_path: output.clone(),
                },
            )?;
            emit(&output, &to_json_string(&rep).map_err(anyhow::Error::from)?)?;
        }
        Command::Landscape {
            model: path,
            m,
            plane,
            through_critical,
            extent,
            grid,
            seeds,
            seed,
            output,
        } => {
            let (gs, gt) = parse_grid(&grid)?;
            if m < 2 {
                return Err(Failure::Usage(anyhow!("--m must be at least 2")));
            }
            let model = load_model(&path)?;
            let slice = match (&plane, through_critical) {
                (Some(p), _) => read_plane(p, m, model.dim())?,
                (None, Some(idx)) => {
                    if !(extent > 0.0) {
                        return Err(Failure::Usage(anyhow!("--extent must be positive")));
                    }
                    let search = Search {
                        model: path.clone(),
                        m,
                        seeds,
                        seed,
                    };
                    let crit = pick(critical_points(&search, &model)?, idx)?;
                    critical_slice(&model, &crit.cfg, extent)?
                }
                (None, None) => unreachable!("clap requires one of the slice options"),
            };
            let csv = landscape_csv(&model, &slice, gs, gt)?;
            write_manifest(
                &cli.manifest,
                RunManifest {
                    command: "landscape".into(),
                    model_path: Some(path.clone()),
                    parameters: params(json!({
                        "m": m, "plane": plane, "through_critical": through_critical,
                        "extent": extent, "grid": grid, "seeds": seeds, "seed": seed,
                    })),
                    output_path: output.clone(),
                },
            )?;
            emit(&output, &csv)?;
        }
    }
    Ok(())
}

fn expansion_csv(table: &hemibubble_core::expansion::ExpansionTable) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "eps",
        "kind",
        "analytic",
        "numeric",
        "stderr",
        "residual",
        "fitted_order",
        "ci_low",
        "ci_high",
        "expected_order",
        "se_target_met",
    ])?;
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    for r in &table.rows {
        // vector pairings are reported by Euclidean norm
        let (a, nv) = if r.analytic.len() == 1 {
            (r.analytic[0], r.numeric[0])
        } else {
            (norm(&r.analytic), norm(&r.numeric))
        };
        w.write_record([
            format_f64(r.eps),
            r.kind.name().to_string(),
            format_f64(a),
            format_f64(nv),
            format_f64(r.stderr_norm()),
            format_f64(r.abs_err),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            r.se_target_met.to_string(),
        ])?;
    }
    for f in &table.fits {
        w.write_record([
            String::new(),
            format!("fit:{}", f.kind.name()),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            format_f64(f.fit.slope),
            format_f64(f.fit.ci_low),
            format_f64(f.fit.ci_high),
            format_f64(f.expected_order),
            String::new(),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

struct Slice {
    origin: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    s_range: (f64, f64),
    t_range: (f64, f64),
    m: usize,
}

fn parse_grid(s: &str) -> Result<(usize, usize), Failure> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let parse = |p: &str| p.trim().parse::<usize>().ok().filter(|v| *v > 0);
    let out = match parts.as_slice() {
        [a] => parse(a).map(|v| (v, v)),
        [a, b] => parse(a).zip(parse(b)),
        _ => None,
    };
    out.ok_or_else(|| Failure::Usage(anyhow!("--grid must be N or NxM with positive integers, got {s:?}")))
}

fn read_plane(path: &Path, m: usize, d: usize) -> Result<Slice, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading plane {}", path.display()))?;
    let doc: Value = serde_json::from_str(&text).with_context(|| format!("plane JSON {}", path.display()))?;
    let block = |key: &str| -> anyhow::Result<Vec<f64>> {
        let pts: Vec<Vec<f64>> = serde_json::from_value(doc.get(key).cloned().ok_or_else(|| anyhow!("plane JSON needs {key:?}"))?)
            .with_context(|| format!("plane JSON {key:?} must be a list of points"))?;
        if pts.len() != m || pts.iter().any(|p| p.len() != d) {
            bail!("plane JSON {key:?} must hold {m} points in R^{d}");
        }
        Ok(pts.concat())
    };
    let range = |key: &str| -> anyhow::Result<(f64, f64)> {
        match doc.get(key) {
            None => Ok((-1.0, 1.0)),
            Some(v) => {
                let r: [f64; 2] = serde_json::from_value(v.clone()).with_context(|| format!("plane JSON {key:?}"))?;
                if !(r[0] <= r[1]) {
                    bail!("plane JSON {key:?} must be increasing");
                }
                Ok((r[0], r[1]))
            }
        }
    };
    Ok(Slice {
        origin: block("origin")?,
        u: block("u")?,
        v: block("v")?,
        s_range: range("s_range")?,
        t_range: range("t_range")?,
        m,
    })
}

fn critical_slice(model: &CurvatureModel, cfg: &Configuration, extent: f64) -> anyhow::Result<Slice> {
    let h = hess_f(model, cfg)?;
    let (vals, vecs) = sorted_eigen(&h);
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&a, &b| vals[a].abs().total_cmp(&vals[b].abs()).then(a.cmp(&b)));
    let scale = cfg.flat().iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(Slice {
        origin: cfg.flat(),
        u: vecs.column(order[0]).iter().cloned().collect(),
        v: vecs.column(order[1]).iter().cloned().collect(),
        s_range: (-extent * scale, extent * scale),
        t_range: (-extent * scale, extent * scale),
        m: cfg.m(),
    })
}

fn axis(range: (f64, f64), k: usize, count: usize) -> f64 {
    if count == 1 {
        0.5 * (range.0 + range.1)
    } else {
        range.0 + (range.1 - range.0) * k as f64 / (count - 1) as f64
    }
}

fn landscape_csv(model: &CurvatureModel, sl: &Slice, gs: usize, gt: usize) -> Result<String, Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Failure::Usage(e.into());
    w.write_record(["s", "t", "F", "singular"]).map_err(io)?;
    let mut regular = 0usize;
    for a in 0..gs {
        let s = axis(sl.s_range, a, gs);
        for b in 0..gt {
            let t = axis(sl.t_range, b, gt);
            let x: Vec<f64> = (0..sl.origin.len()).map(|c| sl.origin[c] + s * sl.u[c] + t * sl.v[c]).collect();
            let cfg = Configuration::from_flat(&x, sl.m)?;
            let (f, singular) = match eval_f(model, &cfg) {
                Ok(f) => (format_f64(f), false),
                Err(Error::Domain(_)) => (String::new(), true),
                Err(e) => return Err(e.into()),
            };
            if !singular {
                regular += 1;
            }
            w.write_record([format_f64(s), format_f64(t), f, (singular as u8).to_string()]).map_err(io)?;
        }
    }
    if regular == 0 {
        return Err(Error::Domain("every configuration on the slice is singular".into()).into());
    }
    let bytes = w.into_inner().map_err(|e| Failure::Usage(anyhow!("{e}")))?;
    Ok(String::from_utf8(bytes).map_err(anyhow::Error::from)?)
}
