//! CSV and text renderings of results.

use std::fmt::Write as _;
use std::path::Path;

use chmm::evidence::{Category, EvidenceEstimate, Method, MethodSummary, RankingTable};
use chmm::{Error, Result};

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

pub fn num(x: f64) -> String {
    if x == f64::NEG_INFINITY {
        "-inf".into()
    } else if x == f64::INFINITY {
        "inf".into()
    } else {
        format!("{x}")
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn parse_num(s: &str) -> Result<Option<f64>> {
    match s.trim() {
        "" => Ok(None),
        "-inf" => Ok(Some(f64::NEG_INFINITY)),
        "inf" => Ok(Some(f64::INFINITY)),
        v => v.parse().map(Some).map_err(|_| Error::Parse(format!("not a number: {v:?}"))),
    }
}

pub fn to_csv(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.to_string()))
}

pub const EVIDENCE_HEADER: [&str; 6] = ["model", "log_ml", "se_log", "lo3", "hi3", "category"];

pub fn ranking_csv(table: &RankingTable) -> Result<Vec<u8>> {
    to_csv(
        &EVIDENCE_HEADER,
        table.rows.iter().map(|r| {
            let e = r.estimate.as_ref();
            vec![
                r.model.to_string(),
                opt(e.map(|e| e.log_ml)),
                opt(e.map(|e| e.se_log)),
                opt(e.map(|e| e.lo3)),
                opt(e.map(|e| e.hi3)),
                r.category.name().to_string(),
            ]
        }),
    )
}

/// Reads evidence rows written by `evidence` or `rank`.
pub fn read_evidence_csv(path: &Path) -> Result<Vec<(u8, Option<EvidenceEstimate>)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = rdr.headers().map_err(csv_err)?.clone();
    if headers.iter().ne(EVIDENCE_HEADER.iter().copied()) {
        return Err(Error::Parse(format!("{}: expected header {}", path.display(), EVIDENCE_HEADER.join(","))));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let model: u8 = rec[0].trim().parse().map_err(|_| Error::Parse(format!("bad model {:?}", &rec[0])))?;
        Category::parse(&rec[5])?;
        let est = match parse_num(&rec[1])? {
            None => None,
            Some(log_ml) => Some(EvidenceEstimate {
                model: Some(model),
                log_ml,
                se_log: parse_num(&rec[2])?.unwrap_or(f64::NAN),
                lo3: parse_num(&rec[3])?.unwrap_or(f64::NAN),
                hi3: parse_num(&rec[4])?.unwrap_or(f64::NAN),
                n_theta: 0,
                l_inner: 0,
                method: "file".into(),
                support_failures: 0,
                regenerations: 0,
            }),
        };
        out.push((model, est));
    }
    Ok(out)
}

pub fn ranking_text(table: &RankingTable) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:>5} {:>5} {:>11} {:>23} {:>9}  category", "model", "rank", "log_ml", "3 SE range", "log BF");
    for r in &table.rows {
        match &r.estimate {
            Some(e) => {
                let _ = writeln!(
                    s,
                    "{:>5} {:>5} {:>11.2} ({:>9.2}, {:>9.2}) {:>9.2}  {}",
                    r.model,
                    r.rank.map(|x| x.to_string()).unwrap_or_default(),
                    e.log_ml,
                    e.lo3,
                    e.hi3,
                    r.log_bf_vs_best.unwrap_or(f64::NAN),
                    r.category.name()
                );
            }
            None => {
                let _ = writeln!(s, "{:>5} {:>5} {:>11} {:>23} {:>9}  {}", r.model, "", "", "", "", r.category.name());
            }
        }
    }
    s
}

pub const COMPARE_HEADER: [&str; 9] = ["design", "method", "log_mean", "se_log", "lo3", "hi3", "n", "failures", "note"];

pub fn compare_csv(rows: &[(String, MethodSummary)]) -> Result<Vec<u8>> {
    to_csv(
        &COMPARE_HEADER,
        rows.iter().map(|(d, m)| {
            vec![
                d.clone(),
                m.method.name().to_string(),
                opt(m.log_mean),
                opt(m.se_log),
                opt(m.lo3),
                opt(m.hi3),
                m.n.to_string(),
                m.failures.to_string(),
                m.note.clone().unwrap_or_default(),
            ]
        }),
    )
}

/// One line per design with the integer part of the log marginal
/// likelihood factored out to the left.
pub fn compare_text(designs: &[String], rows: &[(String, MethodSummary)]) -> String {
    let methods: Vec<_> = {
        let mut v = Vec::new();
        for (_, m) in rows {
            if !v.contains(&m.method) {
                v.push(m.method);
            }
        }
        v
    };
    let mut s = String::new();
    let _ = write!(s, "{:<12} {:>6}", "design", "int");
    for m in &methods {
        let label = if *m == Method::Oracle { "FF".to_string() } else { m.name().to_uppercase() };
        let _ = write!(s, " {label:>24}");
    }
    s.push('\n');
    for d in designs {
        let here: Vec<&MethodSummary> = rows.iter().filter(|(x, _)| x == d).map(|(_, m)| m).collect();
        let int = here
            .iter()
            .find_map(|m| m.log_mean.filter(|v| v.is_finite()))
            .map(f64::floor)
            .unwrap_or(0.0);
        let _ = write!(s, "{:<12} {:>6}", d, int);
        for m in &methods {
            let cell = match here.iter().find(|x| x.method == *m) {
                Some(MethodSummary { log_mean: Some(v), lo3: Some(lo), hi3: Some(hi), se_log: Some(se), .. }) => {
                    if *se == 0.0 {
                        format!("{:.3}", v - int)
                    } else {
                        format!("{:.3} ({:.3}, {:.3})", v - int, lo - int, hi - int)
                    }
                }
                _ => String::new(),
            };
            let _ = write!(s, " {cell:>24}");
        }
        s.push('\n');
    }
    s
}
