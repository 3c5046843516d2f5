//! Table-shaped markdown/CSV output and paired comparisons of corpus
//! reports.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::engine::{CorpusReport, MeanStd};

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("paired samples differ in length: {0} vs {1}")]
    Unpaired(usize, usize),
    #[error("a paired t-test needs at least two pairs, got {0}")]
    TooFew(usize),
    #[error("no columns to report")]
    NoColumns,
    #[error("columns disagree on class count: {0} vs {1}")]
    ClassCount(usize, usize),
}

pub type Result<T, E = ReportError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    /// Two-sided.
    pub p: f64,
    pub mean_difference: f64,
}

/// Two-sided paired t-test on `a - b`.
///
/// All-zero differences give `t = 0, p = 1`; constant non-zero
/// differences give an infinite `t` and `p = 0`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(ReportError::Unpaired(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(ReportError::TooFew(n));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    if var == 0.0 {
        let (t, p) = if mean == 0.0 { (0.0, 1.0) } else { (f64::INFINITY.copysign(mean), 0.0) };
        return Ok(TTest {
            t,
            df,
            p,
            mean_difference: mean,
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("df >= 1");
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(TTest {
        t,
        df,
        p,
        mean_difference: mean,
    })
}

/// One model's results, titled for a table column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub title: String,
    pub report: CorpusReport,
}

fn pct(m: Option<MeanStd>) -> String {
    m.map_or("-".into(), |m| format!("{:.1} ± {:.1}", 100.0 * m.mean, 100.0 * m.std))
}

fn mm(m: Option<MeanStd>) -> String {
    m.map_or("undefined".into(), |m| format!("{:.2}", m.mean))
}

fn mm_std(m: Option<MeanStd>) -> String {
    m.map_or("undefined".into(), |m| format!("{:.2} ± {:.2}", m.mean, m.std))
}

fn class_count(columns: &[Column]) -> Result<usize> {
    let first = columns.first().ok_or(ReportError::NoColumns)?.report.num_classes;
    for c in columns {
        if c.report.num_classes != first {
            return Err(ReportError::ClassCount(first, c.report.num_classes));
        }
    }
    Ok(first)
}

fn header(columns: &[Column]) -> String {
    let titles: Vec<&str> = columns.iter().map(|c| c.title.as_str()).collect();
    let mut s = format!("| Models | {} |\n", titles.join(" | "));
    s += &format!("|---|{}\n", "---|".repeat(columns.len()));
    s
}

/// Name for class `k`: `names[k]` when given, otherwise `class k`.
pub fn class_label(names: Option<&[&str]>, k: usize) -> String {
    names
        .and_then(|n| n.get(k))
        .map_or_else(|| format!("class {k}"), |s| s.to_string())
}

/// Averages over all organs, one column per model: a DSC (%) row with
/// `mean ± std` over cases and a 95HD (mm) row.
pub fn summary_markdown(columns: &[Column]) -> Result<String> {
    class_count(columns)?;
    let mut s = header(columns);
    let dsc: Vec<String> = columns.iter().map(|c| pct(Some(c.report.mean_dsc))).collect();
    let hd: Vec<String> = columns.iter().map(|c| mm(c.report.mean_hd95)).collect();
    s += &format!("| DSC (%) | {} |\n", dsc.join(" | "));
    s += &format!("| 95HD (mm) | {} |\n", hd.join(" | "));
    Ok(s)
}

/// Per-organ DSC rows (`mean ± std`, %) in class order, one column per
/// model, followed by mean DSC and mean 95HD rows. `classes` restricts
/// the rows to a subset such as the small organs.
pub fn class_markdown(columns: &[Column], names: Option<&[&str]>, classes: Option<&[usize]>) -> Result<String> {
    let c = class_count(columns)?;
    let all: Vec<usize> = (1..c).collect();
    let rows = classes.unwrap_or(&all);
    let mut s = header(columns);
    for &k in rows {
        let cells: Vec<String> = columns
            .iter()
            .map(|col| pct(col.report.per_class.iter().find(|a| a.class_id == k).and_then(|a| a.dsc)))
            .collect();
        s += &format!("| {} | {} |\n", class_label(names, k), cells.join(" | "));
    }
    let dsc: Vec<String> = columns.iter().map(|c| pct(Some(c.report.mean_dsc))).collect();
    let hd: Vec<String> = columns.iter().map(|c| mm_std(c.report.mean_hd95)).collect();
    s += &format!("| Mean DSC | {} |\n", dsc.join(" | "));
    s += &format!("| Mean 95HD (mm) | {} |\n", hd.join(" | "));
    Ok(s)
}

/// Long-format CSV: one row per model and class plus a `mean` row.
pub fn csv(columns: &[Column], names: Option<&[&str]>) -> Result<String> {
    class_count(columns)?;
    let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
    let mut s = String::from("model,class_id,class,dsc_mean,dsc_std,hd95_mean,hd95_std,cases,undefined_hd95\n");
    for col in columns {
        for a in &col.report.per_class {
            s += &format!(
                "{},{},{},{},{},{},{},{},{}\n",
                col.title,
                a.class_id,
                class_label(names, a.class_id),
                f(a.dsc.map(|m| m.mean)),
                f(a.dsc.map(|m| m.std)),
                f(a.hd95.map(|m| m.mean)),
                f(a.hd95.map(|m| m.std)),
                a.dsc.map_or(0, |m| m.n),
                a.undefined_hd95
            );
        }
        let r = &col.report;
        s += &format!(
            "{},,mean,{},{},{},{},{},\n",
            col.title,
            r.mean_dsc.mean,
            r.mean_dsc.std,
            f(r.mean_hd95.map(|m| m.mean)),
            f(r.mean_hd95.map(|m| m.std)),
            r.mean_dsc.n
        );
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{CaseReport, ClassAggregate};
    use crate::metrics::{ClassMetrics, Hd95, MetricReport};

    fn report(dsc: &[[f64; 2]]) -> CorpusReport {
        let cases = dsc
            .iter()
            .enumerate()
            .map(|(i, d)| CaseReport {
                id: format!("c{i}"),
                report: MetricReport {
                    per_class: vec![
                        ClassMetrics {
                            class_id: 1,
                            dsc: d[0],
                            hd95: Hd95::Mm(1.0),
                        },
                        ClassMetrics {
                            class_id: 2,
                            dsc: d[1],
                            hd95: Hd95::Undefined,
                        },
                    ],
                    mean_dsc: (d[0] + d[1]) / 2.0,
                    mean_hd95: Hd95::Mm(1.0),
                    absent: vec![],
                },
            })
            .collect();
        CorpusReport::from_cases(3, cases).unwrap()
    }

    #[test]
    fn identical_samples() {
        let a = [0.8, 0.7, 0.9];
        let t = paired_t_test(&a, &a).unwrap();
        assert_eq!((t.t, t.p), (0.0, 1.0));
    }

    #[test]
    fn t_test_reference() {
        // d = [1, 2, 3, 4]: mean 2.5, sd sqrt(5/3), t = 2.5 / (sd / 2)
        let a = [2.0, 4.0, 6.0, 8.0];
        let b = [1.0, 2.0, 3.0, 4.0];
        let t = paired_t_test(&a, &b).unwrap();
        let expect = 2.5 / ((5.0f64 / 3.0).sqrt() / 2.0);
        assert!((t.t - expect).abs() < 1e-12);
        assert_eq!(t.df, 3);
        // two-sided p for t = 3.873, df = 3
        assert!((t.p - 0.030_466).abs() < 1e-5, "{}", t.p);
    }

    #[test]
    fn t_test_errors() {
        assert_eq!(paired_t_test(&[1.0], &[1.0]), Err(ReportError::TooFew(1)));
        assert_eq!(paired_t_test(&[1.0, 2.0], &[1.0]), Err(ReportError::Unpaired(2, 1)));
    }

    #[test]
    fn class_rows_follow_class_order() {
        let col = Column {
            title: "A".into(),
            report: report(&[[1.0, 0.5], [1.0, 0.5]]),
        };
        let names = ["background", "lens", "chiasm"];
        let md = class_markdown(std::slice::from_ref(&col), Some(&names), None).unwrap();
        let lines: Vec<&str> = md.lines().collect();
        assert_eq!(lines[0], "| Models | A |");
        assert_eq!(lines[2], "| lens | 100.0 ± 0.0 |");
        assert_eq!(lines[3], "| chiasm | 50.0 ± 0.0 |");
        assert_eq!(lines[4], "| Mean DSC | 75.0 ± 0.0 |");
        assert_eq!(lines[5], "| Mean 95HD (mm) | 1.00 ± 0.00 |");
    }

    #[test]
    fn summary_has_two_rows() {
        let cols = vec![
            Column {
                title: "A".into(),
                report: report(&[[1.0, 0.0], [0.0, 1.0]]),
            },
            Column {
                title: "B".into(),
                report: report(&[[1.0, 1.0], [1.0, 1.0]]),
            },
        ];
        let md = summary_markdown(&cols).unwrap();
        let lines: Vec<&str> = md.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[2], "| DSC (%) | 50.0 ± 0.0 | 100.0 ± 0.0 |");
        assert_eq!(lines[3], "| 95HD (mm) | 1.00 | 1.00 |");
    }

    #[test]
    fn csv_rows() {
        let col = Column {
            title: "A".into(),
            report: report(&[[1.0, 0.5]]),
        };
        let text = csv(&[col], None).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "A,1,class 1,1,0,1,0,1,0");
        assert_eq!(lines[2], "A,2,class 2,0.5,0,,,1,1");
    }

    #[test]
    fn aggregate_shape() {
        let r = report(&[[1.0, 0.0], [0.5, 0.0]]);
        let a: &ClassAggregate = &r.per_class[0];
        assert_eq!(a.dsc.unwrap().mean, 0.75);
        assert!((a.dsc.unwrap().std - 0.125f64.sqrt()).abs() < 1e-12);
    }
}
