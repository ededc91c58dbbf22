//! Plain delimited output tables.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::bootstrap::BootstrapResult;
use crate::data::SubjectSeries;
use crate::em::FitResult;
use crate::error::{Error, Result};
use crate::filter::FilterOutput;
use crate::io::dataset::format_f64;
use crate::params::ParameterSet;
use crate::smoother::SmootherOutput;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

fn num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format_f64(v)
    }
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Numeric value of `name` in row `i`; empty cells read as `NaN`.
    pub fn number(&self, i: usize, name: &str) -> Result<f64> {
        let c = self
            .column(name)
            .ok_or_else(|| Error::Validation(format!("no column `{name}`")))?;
        match self.rows[i][c].as_str() {
            "" => Ok(f64::NAN),
            s => s.parse().map_err(|_| Error::Parse {
                row: i + 2,
                msg: format!("`{name}` value `{s}` is not a number"),
            }),
        }
    }

    pub fn write<W: Write>(&self, writer: W) -> Result<()> {
        let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.header).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record(r).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(File::create(path)?)
    }

    pub fn read<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let parse_err = |e: csv::Error| Error::Parse {
            row: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        };
        let header = rdr.headers().map_err(parse_err)?.iter().map(str::to_string).collect();
        let rows = rdr
            .records()
            .map(|r| r.map(|r| r.iter().map(str::to_string).collect()).map_err(parse_err))
            .collect::<Result<_>>()?;
        Ok(Self { header, rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(File::open(path)?)
    }
}

/// Constrained-scale estimates next to their starting values.
pub fn parameter_table(estimate: &ParameterSet, start: &ParameterSet) -> Table {
    let mut t = Table::new(["name", "estimate", "initial", "transform"]);
    for e in estimate.entries() {
        t.push(vec![
            e.name.clone(),
            num(e.value),
            num(start.get(&e.name).unwrap_or(f64::NAN)),
            format!("{:?}", e.transform).to_lowercase(),
        ]);
    }
    t
}

pub fn trace_table(fit: &FitResult) -> Table {
    let mut t = Table::new(["iteration", "loglik", "d_em"]);
    for (i, ll) in fit.loglik_trace.iter().enumerate() {
        let d = if i == 0 { f64::NAN } else { fit.d_em_trace.get(i - 1).copied().unwrap_or(f64::NAN) };
        t.push(vec![i.to_string(), num(*ll), num(d)]);
    }
    t
}

fn component_names(base: &str, q: usize) -> Vec<String> {
    if q == 1 {
        vec![base.to_string()]
    } else {
        (0..q).map(|k| format!("{base}_{k}")).collect()
    }
}

/// Filtered and (optionally) smoothed state means, variances (diagonal) and
/// regime-1 probabilities, one row per subject and time.
pub fn series_table(subjects: &[(&SubjectSeries, &FilterOutput, Option<&SmootherOutput>)]) -> Table {
    let q = subjects
        .iter()
        .find_map(|(_, f, _)| f.steps.first().map(|s| s.marg_mean.len()))
        .unwrap_or(1);
    let smoothed = subjects.iter().any(|(_, _, s)| s.is_some());
    let mut header = vec!["subject_id".to_string(), "time".to_string()];
    header.extend(component_names("theta_filt", q));
    header.extend(component_names("var_filt", q));
    header.push("prob_filt".into());
    if smoothed {
        header.extend(component_names("theta_smooth", q));
        header.extend(component_names("var_smooth", q));
        header.push("prob_smooth".into());
    }
    let mut t = Table::new(header);
    for (series, filter, smooth) in subjects {
        for (i, step) in filter.steps.iter().enumerate() {
            let mut row = vec![series.id.clone(), series.time_label(i + 1).to_string()];
            row.extend(step.marg_mean.iter().map(|v| num(*v)));
            row.extend((0..q).map(|k| num(step.marg_cov[(k, k)])));
            row.push(num(step.regime_prob[1]));
            if smoothed {
                match smooth {
                    Some(s) => {
                        row.extend(s.smooth_mean[i].iter().map(|v| num(*v)));
                        row.extend((0..q).map(|k| num(s.smooth_cov[i][(k, k)])));
                        row.push(num(s.smooth_prob[i][1]));
                    }
                    None => row.extend(std::iter::repeat_n(String::new(), 2 * q + 1)),
                }
            }
            t.push(row);
        }
    }
    t
}

/// One-step-ahead predictions: the row labelled with time `t` holds
/// `θ_{t|t-1}` and `Pr(I_t = 1 | ψ_{t-1})`.
pub fn prediction_table(subjects: &[(&SubjectSeries, &SmootherOutput)]) -> Table {
    let q = subjects.first().map_or(1, |(_, s)| s.pred_mean.first().map_or(1, |m| m.len()));
    let mut header = vec!["subject_id".to_string(), "time".to_string()];
    header.extend(component_names("theta_pred", q));
    header.extend(component_names("var_pred", q));
    header.push("prob_pred".into());
    let mut t = Table::new(header);
    for (series, s) in subjects {
        for (i, m) in s.pred_mean.iter().enumerate() {
            let mut row = vec![series.id.clone(), series.time_label(i + 1).to_string()];
            row.extend(m.iter().map(|v| num(*v)));
            row.extend((0..q).map(|k| num(s.pred_cov[i][(k, k)])));
            row.push(num(s.pred_prob[i]));
            t.push(row);
        }
    }
    t
}

/// Estimates with BCa limits, one row per parameter.
pub fn interval_table(result: &BootstrapResult) -> Table {
    let mut t = Table::new(["name", "estimate", "lower", "upper", "z0", "acceleration", "replicates"]);
    let used = result.estimates.len().to_string();
    for ((name, point), ci) in result.names.iter().zip(&result.point).zip(&result.intervals) {
        t.push(vec![
            name.clone(),
            num(*point),
            num(ci.lower),
            num(ci.upper),
            num(ci.z0),
            num(ci.acceleration),
            used.clone(),
        ]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::{fit, EmConfig};
    use crate::model::ModelTemplate;
    use crate::filter::run_filter;
    use crate::simulate::{simulate_study, StudyDesign};
    use crate::smoother::run_smoother;
    use crate::PluginFeedback;

    fn reread(t: &Table) -> Table {
        let mut buf = Vec::new();
        t.write(&mut buf).unwrap();
        Table::read(buf.as_slice()).unwrap()
    }

    #[test]
    fn emitted_tables_reparse() {
        let design = StudyDesign { m: 3, n: 20, missing_rate: 0.1, ..Default::default() };
        let data: Vec<_> = simulate_study(&design).unwrap().into_iter().map(|s| s.series).collect();
        let truth = design.true_values().to_parameter_set();
        let model = design.template().build(&truth).unwrap();
        let runs: Vec<_> = data
            .iter()
            .map(|s| run_smoother(s, &model, &PluginFeedback::zero(s.len())).unwrap())
            .collect();
        let rows: Vec<_> = data.iter().zip(&runs).map(|(s, (f, sm))| (s, f, Some(sm))).collect();
        let t = series_table(&rows);
        assert_eq!(t.rows.len(), 60);
        let back = reread(&t);
        assert_eq!(back, t);
        for i in 0..t.rows.len() {
            let p = back.number(i, "prob_filt").unwrap();
            let f = runs[i / 20].0.steps[i % 20].regime_prob[1];
            assert_eq!(p, f);
            assert!((0.0..=1.0).contains(&back.number(i, "prob_smooth").unwrap()));
        }

        let rows: Vec<_> = data.iter().zip(&runs).map(|(s, (_, sm))| (s, sm)).collect();
        let p = prediction_table(&rows);
        assert_eq!(p.number(0, "time").unwrap(), 1.0);
        assert_eq!(p.rows.len(), 60);
        assert_eq!(reread(&p), p);

        let only_filter: Vec<_> = data
            .iter()
            .map(|s| run_filter(s, &model, &PluginFeedback::zero(s.len())).unwrap())
            .collect();
        let rows: Vec<_> = data.iter().zip(&only_filter).map(|(s, f)| (s, f, None)).collect();
        let t = series_table(&rows);
        assert!(t.column("prob_smooth").is_none());

        let r = fit(&data, &design.template(), &EmConfig { n_max: 2, ..Default::default() }, &truth).unwrap();
        let pt = parameter_table(&r.params, &truth);
        assert_eq!(pt.rows.len(), 13);
        let back = reread(&pt);
        for (i, e) in r.params.entries().iter().enumerate() {
            assert_eq!(back.number(i, "estimate").unwrap(), e.value);
        }
        let tr = reread(&trace_table(&r));
        assert_eq!(tr.rows.len(), r.loglik_trace.len());
        assert!(tr.number(0, "d_em").unwrap().is_nan());
    }
}
