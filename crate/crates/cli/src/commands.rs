use std::path::PathBuf;
use std::time::Instant;

use mssfs::bench::scaling_benchmark;
use mssfs::bootstrap::{replicate_config, run_bootstrap};
use mssfs::em::{fit, self_consistent_feedback, FitResult};
use mssfs::filter::FilterOutput;
use mssfs::io::config::TEMPERATURE;
use mssfs::io::dataset::save_dataset;
use mssfs::io::table::{interval_table, parameter_table, prediction_table, series_table, trace_table};
use mssfs::io::{load_dataset, Dataset, RunConfig, Table};
use mssfs::simulate::simulate_panel;
use mssfs::smoother::{run_smoother, SmootherOutput};
use mssfs::{Error, ModelSpec, ModelTemplate, ParameterSet, PluginFeedback, Result, SubjectSeries};

use crate::metadata::{BootstrapInfo, DataInfo, FitInfo, Metadata};
use crate::{Args, Command};

/// Covariate labels of simulated data.
const SIMULATED_COVARIATES: [&str; 2] = ["male", "age"];

struct Run {
    config: RunConfig,
    out: PathBuf,
    meta: Metadata,
}

impl Run {
    fn save(&mut self, name: &str, table: &Table) -> Result<()> {
        table.save(&self.out.join(name))?;
        self.meta.artifacts.push(name.to_string());
        Ok(())
    }

    fn data(&mut self) -> Result<Dataset> {
        let path = self
            .config
            .data
            .clone()
            .ok_or_else(|| Error::Config("this command needs a dataset: pass --data or set `data`".into()))?;
        let t0 = Instant::now();
        let d = load_dataset(&path)?;
        self.meta.time("load", t0);
        self.meta.data = Some(DataInfo::of(&d));
        Ok(d)
    }
}

pub fn resolve_config(args: &Args) -> Result<RunConfig> {
    let mut config = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(t) = args.threads {
        config.threads = t;
    }
    if let Some(d) = &args.data {
        config.data = Some(d.clone());
    }
    if let Some(o) = &args.out {
        config.output = Some(o.clone());
    }
    config.validate()?;
    Ok(config)
}

pub fn run(args: &Args) -> Result<()> {
    let config = resolve_config(args)?;
    let out = config
        .output
        .clone()
        .ok_or_else(|| Error::Config("no output directory: pass --out or set `output`".into()))?;
    std::fs::create_dir_all(&out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let name = format!("{:?}", args.command).to_lowercase();
    let mut run = Run { meta: Metadata::new(&name, &config), config, out };
    let t0 = Instant::now();
    pool.install(|| match args.command {
        Command::Simulate => simulate(&mut run),
        Command::Fit => fit_command(&mut run, false).map(|_| ()),
        Command::Filter => evaluate(&mut run, args.command),
        Command::Smooth => evaluate(&mut run, args.command),
        Command::Predict => evaluate(&mut run, args.command),
        Command::Bootstrap => bootstrap(&mut run),
        Command::Bench => bench(&mut run),
    })?;
    run.meta.time("total", t0);
    run.meta.save(&run.out.join("metadata.json"))
}

fn simulate(run: &mut Run) -> Result<()> {
    let design = run.config.study_design();
    let (template, truth): (Box<dyn ModelTemplate>, ParameterSet) = if run.config.model.preset == TEMPERATURE {
        let mut truth = design.true_values().to_parameter_set();
        for (name, v) in &run.config.initial {
            truth
                .set(name, *v)
                .map_err(|_| Error::Config(format!("unknown parameter `{name}` in [initial]")))?;
        }
        (Box::new(design.template()), truth)
    } else {
        run.config.model(SIMULATED_COVARIATES.len())?
    };
    let model = template.build(&truth)?;
    let t0 = Instant::now();
    let subjects = simulate_panel(&model, &design)?;
    run.meta.time("simulate", t0);

    let states = state_table(&subjects);
    let series: Vec<SubjectSeries> = subjects.into_iter().map(|s| s.series).collect();
    let dataset = Dataset::new(series, SIMULATED_COVARIATES.iter().map(|s| s.to_string()).collect())?;
    save_dataset(&dataset, &run.out.join("dataset.csv"))?;
    run.meta.artifacts.push("dataset.csv".into());
    run.meta.data = Some(DataInfo::of(&dataset));
    run.save("truth.csv", &parameter_table(&truth, &truth))?;
    run.save("states.csv", &states)
}

fn state_table(subjects: &[mssfs::simulate::SimulatedSubject]) -> Table {
    let q = subjects.first().and_then(|s| s.true_states.first()).map_or(1, |v| v.len());
    let mut header = vec!["subject_id".to_string(), "time".to_string()];
    if q == 1 {
        header.push("theta".into());
    } else {
        header.extend((0..q).map(|k| format!("theta_{k}")));
    }
    header.push("regime".into());
    let mut t = Table::new(header);
    for s in subjects {
        for (i, (theta, regime)) in s.true_states.iter().zip(&s.true_regimes).enumerate() {
            let mut row = vec![s.series.id.clone(), s.series.time_label(i + 1).to_string()];
            row.extend(theta.iter().map(|v| format!("{v:?}")));
            row.push(regime.to_string());
            t.push(row);
        }
    }
    t
}

fn run_all(
    subjects: &[SubjectSeries],
    model: &ModelSpec,
    feedback: &[PluginFeedback],
) -> Result<Vec<(FilterOutput, SmootherOutput)>> {
    subjects
        .iter()
        .zip(feedback)
        .map(|(s, fb)| run_smoother(s, model, fb).map_err(|e| e.in_subject(&s.id)))
        .collect()
}

fn write_series(run: &mut Run, subjects: &[SubjectSeries], outputs: &[(FilterOutput, SmootherOutput)], smoothed: bool) -> Result<()> {
    let rows: Vec<_> = subjects
        .iter()
        .zip(outputs)
        .map(|(s, (f, sm))| (s, f, smoothed.then_some(sm)))
        .collect();
    run.save("series.csv", &series_table(&rows))
}

fn fit_command(run: &mut Run, quiet_series: bool) -> Result<(Dataset, Box<dyn ModelTemplate>, FitResult)> {
    let data = run.data()?;
    let (template, start) = run.config.model(data.covariate_names.len())?;
    let t0 = Instant::now();
    let r = fit(&data.subjects, template.as_ref(), &run.config.em, &start)?;
    run.meta.time("fit", t0);
    run.meta.fit = Some(FitInfo::of(&r));
    run.save("parameters.csv", &parameter_table(&r.params, &start))?;
    run.save("trace.csv", &trace_table(&r))?;
    if !quiet_series {
        let model = template.build(&r.params)?;
        let outputs = run_all(&data.subjects, &model, &r.z_hat)?;
        write_series(run, &data.subjects, &outputs, true)?;
    }
    Ok((data, template, r))
}

/// Filter, smooth or predict at the configured parameters, with the
/// self-consistent plug-in feedback at those parameters.
fn evaluate(run: &mut Run, command: Command) -> Result<()> {
    let data = run.data()?;
    let (template, params) = run.config.model(data.covariate_names.len())?;
    let model = template.build(&params)?;
    let t0 = Instant::now();
    let (_, feedback) = self_consistent_feedback(&data.subjects, &model, 30, 1e-6)?;
    let outputs = run_all(&data.subjects, &model, &feedback)?;
    run.meta.time("evaluate", t0);
    run.meta.evaluation = Some(
        "configured starting parameters; feedback from the self-consistent plug-in at those parameters".into(),
    );
    run.save("parameters.csv", &parameter_table(&params, &params))?;
    match command {
        Command::Filter => write_series(run, &data.subjects, &outputs, false),
        Command::Smooth => write_series(run, &data.subjects, &outputs, true),
        _ => {
            let rows: Vec<_> = data.subjects.iter().zip(&outputs).map(|(s, (_, sm))| (s, sm)).collect();
            run.save("predictions.csv", &prediction_table(&rows))
        }
    }
}

fn bootstrap(run: &mut Run) -> Result<()> {
    let (data, template, base) = fit_command(run, true)?;
    let config = run.config.bootstrap_config();
    let t0 = Instant::now();
    let b = run_bootstrap(&data.subjects, template.as_ref(), &run.config.em, &base, &config)?;
    run.meta.time("bootstrap", t0);
    run.meta.bootstrap = Some(BootstrapInfo {
        replicates: b.replicates,
        level: b.level,
        seed: config.seed,
        successful: b.estimates.len(),
        failures: b.failures.clone(),
        jackknife_failures: b.jackknife_failures.clone(),
        warm_start: true,
        replicate_n_max: replicate_config(&run.config.em).n_max,
    });
    run.save("intervals.csv", &interval_table(&b))
}

fn bench(run: &mut Run) -> Result<()> {
    let c = &run.config;
    let report = scaling_benchmark(&c.bench.m_grid, c.bench.n, c.bench.repeats, &c.em, c.seed, c.threads)?;
    let mut t = Table::new(["m", "seconds", "iterations", "objective_evals", "seconds_per_eval"]);
    for p in &report.points {
        t.push(vec![
            p.m.to_string(),
            format!("{:?}", p.seconds),
            p.iterations.to_string(),
            p.objective_evals.to_string(),
            format!("{:?}", p.seconds_per_eval),
        ]);
    }
    run.save("bench.csv", &t)?;
    run.meta.bench = Some(report);
    Ok(())
}
