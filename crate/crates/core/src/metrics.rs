//! Session-protocol evaluation: base (`A_B`), new (`A_N`) and overall
//! (`A_W`) accuracy per session, and the across-session average `A_avg`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::Sample;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::inference::{multigrain_classify, ncm_classify};
use crate::prototypes::PrototypeBank;
use crate::transforms::TransformSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InferMode {
    Ncm,
    Multigrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub session: u32,
    pub n_base: usize,
    pub n_new: usize,
    pub a_b: f64,
    /// `None` when the split has no incremental-class items (session 0).
    pub a_n: Option<f64>,
    pub a_w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sessions: Vec<SessionMetrics>,
    pub a_avg: f64,
}

impl MetricsReport {
    pub fn from_rows(sessions: Vec<SessionMetrics>) -> Result<Self> {
        let a_avg = aggregate_avg(&sessions)?;
        Ok(Self { sessions, a_avg })
    }

    pub fn last(&self) -> &SessionMetrics {
        self.sessions
            .last()
            .expect("report has at least one session")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("session,n_base,n_new,A_B,A_N,A_W\n");
        for r in &self.sessions {
            let a_n = r.a_n.map(|v| format!("{v:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{:.6},{},{:.6}\n",
                r.session, r.n_base, r.n_new, r.a_b, a_n, r.a_w
            ));
        }
        out
    }

    pub fn to_json(&self, config_echo: &str) -> Result<String> {
        let last = self.last();
        let rows: Vec<_> = self
            .sessions
            .iter()
            .map(|r| {
                serde_json::json!({
                    "session": r.session,
                    "n_base": r.n_base,
                    "n_new": r.n_new,
                    "A_B": r.a_b,
                    "A_N": r.a_n,
                    "A_W": r.a_w,
                })
            })
            .collect();
        let v = serde_json::json!({
            "sessions": rows,
            "final": { "A_B": last.a_b, "A_N": last.a_n, "A_W": last.a_w },
            "A_avg": self.a_avg,
            "config": config_echo,
        });
        Ok(serde_json::to_string_pretty(&v)?)
    }
}

/// Mean of per-session `A_W`.
pub fn aggregate_avg(rows: &[SessionMetrics]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::Empty);
    }
    Ok(rows.iter().map(|r| r.a_w).sum::<f64>() / rows.len() as f64)
}

/// Mean of plain values; the same arithmetic as [`aggregate_avg`].
pub fn mean_of(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Classify every item of `test` and score it. Items whose class belongs to
/// session 0 of the bank count toward `A_B`, the rest toward `A_N`.
pub fn evaluate_session(
    encoder: &EncoderParams,
    transforms: &TransformSet,
    bank: &PrototypeBank,
    test: &[Sample],
    session: u32,
    mode: InferMode,
) -> Result<SessionMetrics> {
    let owners = test
        .iter()
        .map(|s| {
            bank.session_of(s.y)
                .ok_or(Error::CoverageGap { class: s.y })
        })
        .collect::<Result<Vec<u32>>>()?;
    let correct = test
        .par_iter()
        .map(|s| {
            let p = match mode {
                InferMode::Ncm => ncm_classify(&encoder.encode(&s.x)?, bank)?,
                InferMode::Multigrain => multigrain_classify(&s.x, encoder, transforms, bank)?,
            };
            Ok(p.class_id == s.y)
        })
        .collect::<Result<Vec<bool>>>()?;

    let (mut n_base, mut n_new, mut hit_base, mut hit_new) = (0usize, 0usize, 0usize, 0usize);
    for (&owner, &ok) in owners.iter().zip(&correct) {
        if owner == 0 {
            n_base += 1;
            hit_base += ok as usize;
        } else {
            n_new += 1;
            hit_new += ok as usize;
        }
    }
    let ratio = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    let total = n_base + n_new;
    Ok(SessionMetrics {
        session,
        n_base,
        n_new,
        a_b: ratio(hit_base, n_base),
        a_n: (n_new > 0).then(|| ratio(hit_new, n_new)),
        a_w: ratio(hit_base + hit_new, total),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(a_w: f64) -> SessionMetrics {
        SessionMetrics {
            session: 0,
            n_base: 1,
            n_new: 0,
            a_b: a_w,
            a_n: None,
            a_w,
        }
    }

    #[test]
    fn averages() {
        assert_eq!(aggregate_avg(&[row(0.42)]).unwrap(), 0.42);
        assert!((aggregate_avg(&[row(0.8), row(0.6)]).unwrap() - 0.7).abs() < 1e-15);
        assert!(matches!(aggregate_avg(&[]), Err(Error::Empty)));
    }

    #[test]
    fn csv_leaves_session_zero_new_accuracy_blank() {
        let r = MetricsReport::from_rows(vec![row(0.5)]).unwrap();
        assert_eq!(
            r.to_csv(),
            "session,n_base,n_new,A_B,A_N,A_W\n0,1,0,0.500000,,0.500000\n"
        );
        let j: serde_json::Value = serde_json::from_str(&r.to_json("x = 1").unwrap()).unwrap();
        assert!(j["final"]["A_N"].is_null());
        assert_eq!(j["A_avg"], 0.5);
    }
}
