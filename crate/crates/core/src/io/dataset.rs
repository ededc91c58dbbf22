//! Long-format panel files: one row per (subject, time) with a header.
//!
//! Columns: `subject_id`, `time`, an optional `group`, the observation
//! channel(s) `y` or `y1..yp`, then any number of covariate columns. Empty
//! observation cells are missing; covariates must be present on every row
//! and constant within a subject.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::data::SubjectSeries;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub source: Option<String>,
    pub format_version: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub subjects: Vec<SubjectSeries>,
    pub covariate_names: Vec<String>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(subjects: Vec<SubjectSeries>, covariate_names: Vec<String>) -> Result<Self> {
        let d = Self {
            subjects,
            covariate_names,
            provenance: Provenance {
                source: None,
                format_version: FORMAT_VERSION,
            },
        };
        d.validate()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.subjects.first().map_or(1, SubjectSeries::obs_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashMap::new();
        let p = self.obs_dim();
        for s in &self.subjects {
            if seen.insert(s.id.as_str(), ()).is_some() {
                return Err(Error::Validation(format!("duplicate subject id `{}`", s.id)));
            }
            if s.is_empty() {
                return Err(Error::Validation(format!("subject `{}` has no time points", s.id)));
            }
            if s.obs_dim() != p {
                return Err(Error::Validation(format!(
                    "subject `{}` has {} observation channels, expected {p}",
                    s.id,
                    s.obs_dim()
                )));
            }
            if s.covariates.len() != self.covariate_names.len() {
                return Err(Error::Validation(format!(
                    "subject `{}` has {} covariates, expected {}",
                    s.id,
                    s.covariates.len(),
                    self.covariate_names.len()
                )));
            }
        }
        Ok(())
    }
}

struct Layout {
    subject: usize,
    time: usize,
    group: Option<usize>,
    obs: Vec<usize>,
    covariates: Vec<(usize, String)>,
}

fn layout(headers: &csv::StringRecord) -> Result<Layout> {
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    let find = |name: &str| names.iter().position(|h| *h == name);
    let header_err = |msg: String| Error::Parse { row: 1, msg };
    let subject = find("subject_id").ok_or_else(|| header_err("missing `subject_id` column".into()))?;
    let time = find("time").ok_or_else(|| header_err("missing `time` column".into()))?;
    let group = find("group");
    let obs = match find("y") {
        Some(i) => {
            if find("y1").is_some() {
                return Err(header_err("both `y` and `y1` columns present".into()));
            }
            vec![i]
        }
        None => {
            let mut cols = Vec::new();
            while let Some(i) = find(&format!("y{}", cols.len() + 1)) {
                cols.push(i);
            }
            if cols.is_empty() {
                return Err(header_err("missing observation column `y` or `y1`".into()));
            }
            cols
        }
    };
    let mut seen = HashMap::new();
    for (i, n) in names.iter().enumerate() {
        if n.is_empty() {
            return Err(header_err(format!("column {} has an empty name", i + 1)));
        }
        if let Some(j) = seen.insert(*n, i) {
            return Err(header_err(format!("column `{n}` appears at positions {} and {}", j + 1, i + 1)));
        }
    }
    let covariates = names
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != subject && *i != time && Some(*i) != group && !obs.contains(i))
        .map(|(i, n)| (i, n.to_string()))
        .collect();
    Ok(Layout {
        subject,
        time,
        group,
        obs,
        covariates,
    })
}

struct Pending {
    group: String,
    covariates: Vec<f64>,
    covariate_row: usize,
    rows: BTreeMap<i64, (usize, Vec<Option<f64>>)>,
}

fn parse_number(field: &str, row: usize, column: &str) -> Result<f64> {
    let v: f64 = field.parse().map_err(|_| Error::Parse {
        row,
        msg: format!("`{column}` value `{field}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            row,
            msg: format!("`{column}` value `{field}` is not finite"),
        });
    }
    Ok(v)
}

/// Parses a dataset from delimited text. Row numbers in errors count the
/// header as row 1.
pub fn read_dataset<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            row: 1,
            msg: e.to_string(),
        })?
        .clone();
    let lay = layout(&headers)?;
    let obs_names: Vec<&str> = lay.obs.iter().map(|&i| headers[i].trim()).collect();

    let mut order: Vec<String> = Vec::new();
    let mut pending: HashMap<String, Pending> = HashMap::new();
    let mut record = csv::StringRecord::new();
    let mut row = 1;
    loop {
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                let row = e.position().map_or(row + 1, |p| p.line() as usize);
                return Err(Error::Parse {
                    row,
                    msg: e.to_string(),
                });
            }
        }
        row = record.position().map_or(row + 1, |p| p.line() as usize);
        let id = &record[lay.subject];
        if id.is_empty() {
            return Err(Error::Parse {
                row,
                msg: "empty subject_id".into(),
            });
        }
        let time: i64 = record[lay.time].parse().map_err(|_| Error::Parse {
            row,
            msg: format!("time `{}` is not an integer", &record[lay.time]),
        })?;
        let obs = lay
            .obs
            .iter()
            .zip(&obs_names)
            .map(|(&i, name)| match &record[i] {
                "" => Ok(None),
                f => parse_number(f, row, name).map(Some),
            })
            .collect::<Result<Vec<_>>>()?;
        let mut covariates = Vec::with_capacity(lay.covariates.len());
        for (i, name) in &lay.covariates {
            match &record[*i] {
                "" => {
                    return Err(Error::Validation(format!(
                        "missing covariate `{name}` for subject `{id}` at row {row}"
                    )))
                }
                f => covariates.push(parse_number(f, row, name)?),
            }
        }
        let group = lay.group.map(|g| record[g].to_string()).filter(|g| !g.is_empty());

        let entry = pending.entry(id.to_string()).or_insert_with(|| {
            order.push(id.to_string());
            Pending {
                group: group.clone().unwrap_or_else(|| id.to_string()),
                covariates: covariates.clone(),
                covariate_row: row,
                rows: BTreeMap::new(),
            }
        });
        if entry.covariates != covariates {
            return Err(Error::Validation(format!(
                "covariates of subject `{id}` at row {row} differ from row {}",
                entry.covariate_row
            )));
        }
        if let Some(g) = &group {
            if *g != entry.group {
                return Err(Error::Validation(format!(
                    "subject `{id}` changes group to `{g}` at row {row}"
                )));
            }
        }
        if let Some((first, _)) = entry.rows.insert(time, (row, obs)) {
            return Err(Error::Parse {
                row,
                msg: format!("duplicate time {time} for subject `{id}` (first seen at row {first})"),
            });
        }
    }

    let p = lay.obs.len();
    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let s = pending.remove(&id).expect("subject recorded in order");
        let first = *s.rows.keys().next().expect("subject has a row");
        let last = *s.rows.keys().next_back().expect("subject has a row");
        let span = usize::try_from(last - first + 1)
            .ok()
            .filter(|n| *n <= 10_000_000)
            .ok_or_else(|| Error::Validation(format!("subject `{id}` spans too many time points")))?;
        let mut y = vec![f64::NAN; span * p];
        for (t, (_, obs)) in &s.rows {
            let k = (t - first) as usize;
            for (j, v) in obs.iter().enumerate() {
                y[k * p + j] = v.unwrap_or(f64::NAN);
            }
        }
        subjects.push(
            SubjectSeries::from_raw(id, p, y, s.covariates)?
                .with_group(s.group)
                .with_start_time(first),
        );
    }
    if subjects.is_empty() {
        return Err(Error::Validation("dataset has no rows".into()));
    }
    Dataset::new(subjects, lay.covariates.into_iter().map(|(_, n)| n).collect())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut d = read_dataset(File::open(path)?)?;
    d.provenance.source = Some(path.display().to_string());
    Ok(d)
}

/// Shortest text that parses back to the same `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_dataset<W: Write>(dataset: &Dataset, writer: W) -> Result<()> {
    dataset.validate()?;
    let p = dataset.obs_dim();
    let grouped = dataset.subjects.iter().any(|s| s.group != s.id);
    let mut header = vec!["subject_id".to_string(), "time".to_string()];
    if grouped {
        header.push("group".into());
    }
    if p == 1 {
        header.push("y".into());
    } else {
        header.extend((1..=p).map(|j| format!("y{j}")));
    }
    header.extend(dataset.covariate_names.iter().cloned());

    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(&header).map_err(csv_err)?;
    let covariate_text = |s: &SubjectSeries| s.covariates.iter().map(|v| format_f64(*v)).collect::<Vec<_>>();
    for s in &dataset.subjects {
        let cov = covariate_text(s);
        for t in 1..=s.len() {
            let mut rec = vec![s.id.clone(), s.time_label(t).to_string()];
            if grouped {
                rec.push(s.group.clone());
            }
            rec.extend(s.observation(t).iter().map(|v| if v.is_nan() { String::new() } else { format_f64(*v) }));
            rec.extend(cov.iter().cloned());
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    write_dataset(dataset, File::create(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TOY: &str = "\
subject_id,time,y,x1,x2
s1,1,0.5,1,0.2
s1,2,,1,0.2
s1,3,1.5,1,0.2
s2,1,-0.1,0,-1.3
s2,2,0.0,0,-1.3
s2,3,,0,-1.3
";

    #[test]
    fn toy_file() {
        let d = read_dataset(TOY.as_bytes()).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.covariate_names, ["x1", "x2"]);
        let s1 = &d.subjects[0];
        assert_eq!(s1.id, "s1");
        assert_eq!(s1.len(), 3);
        assert!(s1.observation(2)[0].is_nan());
        assert_eq!(s1.observed_count(), 2);
        assert_eq!(d.subjects[1].covariates, [0.0, -1.3]);
        assert!(d.subjects[1].observation(3)[0].is_nan());
    }

    #[test]
    fn duplicate_time_names_the_row() {
        let text = "subject_id,time,y\ns1,1,0\ns1,2,1\ns1,2,3\n";
        match read_dataset(text.as_bytes()) {
            Err(Error::Parse { row, msg }) => {
                assert_eq!(row, 4);
                assert!(msg.contains("row 3"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_cells() {
        let e = read_dataset("subject_id,time,y\ns1,1,abc\n".as_bytes()).unwrap_err();
        assert!(matches!(e, Error::Parse { row: 2, .. }), "{e}");
        let e = read_dataset("subject_id,time,y,x\ns1,1,1,\n".as_bytes()).unwrap_err();
        assert!(matches!(e, Error::Validation(_)), "{e}");
        let e = read_dataset("subject_id,time,y,x\ns1,1,1,1\ns1,2,1,2\n".as_bytes()).unwrap_err();
        assert!(matches!(e, Error::Validation(_)), "{e}");
        let e = read_dataset("subject_id,time,y\ns1,1.5,1\n".as_bytes()).unwrap_err();
        assert!(matches!(e, Error::Parse { .. }), "{e}");
        let e = read_dataset("subject_id,time\ns1,1\n".as_bytes()).unwrap_err();
        assert!(matches!(e, Error::Parse { row: 1, .. }), "{e}");
        let e = read_dataset("subject_id,time,y,y\ns1,1,1,1\n".as_bytes()).unwrap_err();
        assert!(matches!(e, Error::Parse { row: 1, .. }), "{e}");
        assert!(read_dataset("subject_id,time,y\n".as_bytes()).is_err());
        assert!(read_dataset("subject_id,time,y\ns1,1,inf\n".as_bytes()).is_err());
    }

    #[test]
    fn unsorted_rows_and_gaps() {
        let text = "subject_id,time,y\na,5,3\na,2,1\n";
        let d = read_dataset(text.as_bytes()).unwrap();
        let s = &d.subjects[0];
        assert_eq!(s.start_time, 2);
        assert_eq!(s.len(), 4);
        assert_eq!(s.observation(1)[0], 1.0);
        assert!(s.observation(2)[0].is_nan());
        assert_eq!(s.observation(4)[0], 3.0);
        assert_eq!(s.time_label(4), 5);
    }

    #[test]
    fn channels_and_groups() {
        let text = "subject_id,time,group,y1,y2,age\na,0,p1,1,,40\na,1,p1,,2,40\nb,0,p1,3,4,40\n";
        let d = read_dataset(text.as_bytes()).unwrap();
        assert_eq!(d.obs_dim(), 2);
        assert_eq!(d.subjects[1].group, "p1");
        assert_eq!(d.subjects[0].start_time, 0);
        let mut out = Vec::new();
        write_dataset(&d, &mut out).unwrap();
        assert!(same(&read_dataset(out.as_slice()).unwrap(), &d));
    }

    fn arb_dataset() -> impl Strategy<Value = Dataset> {
        (1usize..3, 0usize..3, 1usize..5).prop_flat_map(|(p, d, m)| {
            proptest::collection::vec(
                (
                    -5i64..5,
                    proptest::collection::vec(proptest::option::weighted(0.8, -1e6f64..1e6), 1..6 * p),
                    proptest::collection::vec(-1e3f64..1e3, d),
                    proptest::bool::ANY,
                ),
                m,
            )
            .prop_map(move |subs| {
                let subjects = subs
                    .into_iter()
                    .enumerate()
                    .map(|(i, (start, mut obs, cov, shared))| {
                        obs.truncate(obs.len() / p * p);
                        if obs.is_empty() {
                            obs = vec![Some(0.0); p];
                        }
                        let y = obs.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
                        let s = SubjectSeries::from_raw(format!("s{i}"), p, y, cov).unwrap().with_start_time(start);
                        if shared { s.with_group("g") } else { s }
                    })
                    .collect();
                Dataset::new(subjects, (0..d).map(|j| format!("x{j}")).collect()).unwrap()
            })
        })
    }

    fn same(a: &Dataset, b: &Dataset) -> bool {
        a.covariate_names == b.covariate_names
            && a.subjects.len() == b.subjects.len()
            && a.subjects.iter().zip(&b.subjects).all(|(x, y)| {
                x.id == y.id
                    && x.group == y.group
                    && x.start_time == y.start_time
                    && x.covariates == y.covariates
                    && x.raw().len() == y.raw().len()
                    && x.raw().iter().zip(y.raw()).all(|(u, v)| u.to_bits() == v.to_bits() || (u.is_nan() && v.is_nan()))
            })
    }

    proptest! {
        #[test]
        fn write_then_read_is_identity(d in arb_dataset()) {
            let mut out = Vec::new();
            write_dataset(&d, &mut out).unwrap();
            let back = read_dataset(out.as_slice()).unwrap();
            prop_assert!(same(&d, &back));
        }

        #[test]
        fn arbitrary_text_never_panics(text in "[a-z0-9_,.\\-\n ]{0,200}") {
            let _ = read_dataset(text.as_bytes());
        }
    }
}
