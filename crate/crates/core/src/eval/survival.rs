use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::metrics::median;
use super::{EvalError, Result};

/// Product-limit estimate; one step per distinct observed-event time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KmCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
}

impl KmCurve {
    /// Survival probability just after time `t`.
    pub fn at(&self, t: f64) -> f64 {
        self.times.iter().zip(&self.survival).take_while(|(&ti, _)| ti <= t).last().map_or(1.0, |(_, &s)| s)
    }
}

fn event_times(times: &[f64], events: &[bool]) -> Vec<f64> {
    let mut t: Vec<f64> = times.iter().zip(events).filter(|(_, &e)| e).map(|(&t, _)| t).collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

pub fn kaplan_meier(times: &[f64], events: &[bool]) -> KmCurve {
    let mut curve = KmCurve { times: Vec::new(), survival: Vec::new(), at_risk: Vec::new(), events: Vec::new() };
    let mut s = 1.0;
    for t in event_times(times, events) {
        let n = times.iter().filter(|&&x| x >= t).count();
        let d = times.iter().zip(events).filter(|(&x, &e)| e && x == t).count();
        s *= 1.0 - d as f64 / n as f64;
        curve.times.push(t);
        curve.survival.push(s);
        curve.at_risk.push(n);
        curve.events.push(d);
    }
    curve
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRank {
    pub statistic: f64,
    pub p_value: f64,
    pub observed: [f64; 2],
    pub expected: [f64; 2],
    pub variance: f64,
    /// Set when the variance is zero, e.g. no events at all.
    pub degenerate: bool,
}

/// Two-group log-rank test with hypergeometric variance; `groups` holds 0/1.
pub fn log_rank(times: &[f64], events: &[bool], groups: &[u8]) -> Result<LogRank> {
    if times.len() != events.len() || times.len() != groups.len() {
        return Err(EvalError::LengthMismatch(times.len(), groups.len()));
    }
    if !groups.contains(&0) || !groups.contains(&1) {
        return Err(EvalError::EmptyGroup);
    }
    let (mut o1, mut e1, mut var, mut total_d) = (0.0, 0.0, 0.0, 0.0);
    for t in event_times(times, events) {
        let (mut n, mut n1, mut d, mut d1) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..times.len() {
            if times[i] >= t {
                n += 1.0;
                if groups[i] == 1 {
                    n1 += 1.0;
                }
                if events[i] && times[i] == t {
                    d += 1.0;
                    if groups[i] == 1 {
                        d1 += 1.0;
                    }
                }
            }
        }
        o1 += d1;
        e1 += d * n1 / n;
        total_d += d;
        if n > 1.0 {
            var += d * (n1 / n) * (1.0 - n1 / n) * (n - d) / (n - 1.0);
        }
    }
    let observed = [total_d - o1, o1];
    let expected = [total_d - e1, e1];
    if var <= 0.0 {
        return Ok(LogRank { statistic: 0.0, p_value: 1.0, observed, expected, variance: 0.0, degenerate: true });
    }
    let statistic = (o1 - e1).powi(2) / var;
    let p_value = ChiSquared::new(1.0).expect("one dof").sf(statistic);
    Ok(LogRank { statistic, p_value, observed, expected, variance: var, degenerate: false })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurvivalResult {
    pub threshold: f64,
    /// 1 for the high-risk group.
    pub groups: Vec<u8>,
    pub low: KmCurve,
    pub high: KmCurve,
    pub log_rank: LogRank,
}

/// Split at the median predicted risk (`risk > median` is high), fit KM per
/// group and run the log-rank test.
pub fn survival_analysis(times: &[f64], events: &[bool], risk: &[f64]) -> Result<SurvivalResult> {
    if risk.len() != times.len() {
        return Err(EvalError::LengthMismatch(risk.len(), times.len()));
    }
    let threshold = median(risk);
    let groups: Vec<u8> = risk.iter().map(|&r| (r > threshold) as u8).collect();
    survival_by_groups(times, events, groups, threshold)
}

pub fn survival_by_groups(times: &[f64], events: &[bool], groups: Vec<u8>, threshold: f64) -> Result<SurvivalResult> {
    let pick = |g: u8| -> (Vec<f64>, Vec<bool>) {
        groups.iter().zip(times.iter().zip(events)).filter(|(&x, _)| x == g).map(|(_, (&t, &e))| (t, e)).unzip()
    };
    let (tl, el) = pick(0);
    let (th, eh) = pick(1);
    let log_rank = log_rank(times, events, &groups)?;
    Ok(SurvivalResult { threshold, low: kaplan_meier(&tl, &el), high: kaplan_meier(&th, &eh), groups, log_rank })
}
