use std::collections::HashSet;
use std::path::Path;

use super::{read_file, write_file, Result, StoreError};

const HEADER: &str = "sample_id\tvolume_path\tlabel\ttime\tevent";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Event {
    Censored,
    Observed,
}

impl Event {
    pub fn is_observed(self) -> bool {
        matches!(self, Event::Observed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub sample_id: String,
    pub volume_path: String,
    pub label: Option<u8>,
    /// Follow-up time in months.
    pub time: Option<f64>,
    pub event: Option<Event>,
}

impl ManifestRecord {
    pub fn classification(sample_id: impl Into<String>, volume_path: impl Into<String>, label: u8) -> Self {
        Self {
            sample_id: sample_id.into(),
            volume_path: volume_path.into(),
            label: Some(label),
            time: None,
            event: None,
        }
    }
}

/// Ordered list of cohort samples, one row per sample.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CohortManifest {
    records: Vec<ManifestRecord>,
}

impl CohortManifest {
    pub fn new(records: Vec<ManifestRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            validate_field(&r.sample_id, "sample_id")?;
            validate_field(&r.volume_path, "volume_path")?;
            if r.sample_id.is_empty() {
                return Err(StoreError::Invalid("empty sample_id".into()));
            }
            if !seen.insert(r.sample_id.as_str()) {
                return Err(StoreError::DuplicateSampleId(r.sample_id.clone()));
            }
            if r.time.is_some() && r.event.is_none() {
                return Err(StoreError::TimeWithoutEvent(r.sample_id.clone()));
            }
            if let Some(t) = r.time {
                if !t.is_finite() || t < 0.0 {
                    return Err(StoreError::Invalid(format!("sample {:?}: time {t} is not a finite non-negative value", r.sample_id)));
                }
            }
            if let Some(l) = r.label {
                if l > 1 {
                    return Err(StoreError::Invalid(format!("sample {:?}: label {l} not in {{0,1}}", r.sample_id)));
                }
            }
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, sample_id: &str) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.sample_id == sample_id)
    }

    /// Labels of every record, failing if any is missing.
    pub fn labels(&self) -> Result<Vec<u8>> {
        self.records
            .iter()
            .map(|r| r.label.ok_or_else(|| StoreError::Invalid(format!("sample {:?} has no label", r.sample_id))))
            .collect()
    }

    /// Count of records per label value `(label 0, label 1)`.
    pub fn label_counts(&self) -> (usize, usize) {
        self.records.iter().fold((0, 0), |(a, b), r| match r.label {
            Some(0) => (a + 1, b),
            Some(1) => (a, b + 1),
            _ => (a, b),
        })
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(HEADER);
        out.push('\n');
        for r in &self.records {
            let label = r.label.map(|l| l.to_string()).unwrap_or_default();
            let time = r.time.map(|t| format!("{t:?}")).unwrap_or_default();
            let event = match r.event {
                Some(Event::Observed) => "1",
                Some(Event::Censored) => "0",
                None => "",
            };
            out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", r.sample_id, r.volume_path, label, time, event));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end_matches('\r') == HEADER => {}
            Some((_, h)) => {
                return Err(StoreError::Manifest { line: 1, message: format!("unexpected header {h:?}") })
            }
            None => return Err(StoreError::Manifest { line: 1, message: "missing header row".into() }),
        }
        let mut records = Vec::new();
        for (i, raw) in lines {
            let line_no = i + 1;
            let line = raw.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(StoreError::Manifest {
                    line: line_no,
                    message: format!("expected 5 tab-separated fields, found {}", fields.len()),
                });
            }
            let err = |message: String| StoreError::Manifest { line: line_no, message };
            let label = match fields[2] {
                "" => None,
                "0" => Some(0),
                "1" => Some(1),
                other => return Err(err(format!("label {other:?} not in {{0,1}}"))),
            };
            let time = match fields[3] {
                "" => None,
                s => Some(s.parse::<f64>().map_err(|_| err(format!("time {s:?} is not a number")))?),
            };
            let event = match fields[4] {
                "" => None,
                "1" => Some(Event::Observed),
                "0" => Some(Event::Censored),
                other => return Err(err(format!("event {other:?} not in {{0,1}}"))),
            };
            records.push(ManifestRecord {
                sample_id: fields[0].to_string(),
                volume_path: fields[1].to_string(),
                label,
                time,
                event,
            });
        }
        Self::new(records)
    }
}

fn validate_field(value: &str, what: &str) -> Result<()> {
    if value.contains(['\t', '\n', '\r']) {
        return Err(StoreError::Invalid(format!("{what} {value:?} contains a tab or newline")));
    }
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<CohortManifest> {
    let bytes = read_file(path.as_ref())?;
    let text = String::from_utf8(bytes).map_err(|_| StoreError::Manifest { line: 0, message: "not UTF-8".into() })?;
    CohortManifest::from_tsv(&text)
}

pub fn write_manifest(m: &CohortManifest, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), m.to_tsv().as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifty_record_classification_cohort() {
        let records = (0..50)
            .map(|i| ManifestRecord::classification(format!("s{i:03}"), format!("v/s{i:03}.vmil"), (i % 2) as u8))
            .collect();
        let m = CohortManifest::new(records).unwrap();
        let parsed = CohortManifest::from_tsv(&m.to_tsv()).unwrap();
        assert_eq!(parsed.label_counts(), (25, 25));
        assert_eq!(parsed, m);
    }

    #[test]
    fn empty_cohort_is_valid() {
        let m = CohortManifest::from_tsv(&format!("{HEADER}\n")).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn missing_optionals_stay_absent() {
        let m = CohortManifest::from_tsv(&format!("{HEADER}\na\tp.vmil\t\t\t\nb\tq.vmil\t1\t12.5\t0\n")).unwrap();
        let a = &m.records()[0];
        assert_eq!((a.label, a.time, a.event), (None, None, None));
        let b = &m.records()[1];
        assert_eq!((b.label, b.time, b.event), (Some(1), Some(12.5), Some(Event::Censored)));
    }

    #[test]
    fn duplicate_id_rejected() {
        let text = format!("{HEADER}\na\tp\t0\t\t\na\tq\t1\t\t\n");
        assert!(matches!(CohortManifest::from_tsv(&text), Err(StoreError::DuplicateSampleId(id)) if id == "a"));
    }

    #[test]
    fn time_without_event_rejected() {
        let text = format!("{HEADER}\na\tp\t0\t3.0\t\n");
        assert!(matches!(CohortManifest::from_tsv(&text), Err(StoreError::TimeWithoutEvent(_))));
    }

    #[test]
    fn malformed_rows_rejected() {
        for body in ["a\tp\t2\t\t", "a\tp\t0\tx\t1", "a\tp\t0", "a\tp\t0\t1\tyes"] {
            let text = format!("{HEADER}\n{body}\n");
            assert!(matches!(CohortManifest::from_tsv(&text), Err(StoreError::Manifest { line: 2, .. })), "{body}");
        }
        assert!(CohortManifest::from_tsv("id\tpath\n").is_err());
    }
}
