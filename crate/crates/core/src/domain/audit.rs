use std::fs::OpenOptions;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use parking_lot::Mutex;
use thiserror::Error;

use super::{ThreatEvent, ThreatKind};

#[derive(Debug, Error)]
pub enum AuditError {
    /// The event was appended in memory under `seq` but the file mirror failed.
    #[error("audit mirror write failed for seq {seq}: {source}")]
    Mirror { seq: u64, source: io::Error },
    #[error("audit file: {0}")]
    Io(#[from] io::Error),
    #[error("audit file line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

struct Inner {
    /// Highest seq written before this process started.
    base_seq: u64,
    entries: Vec<ThreatEvent>,
    mirror: Option<Box<dyn Write + Send>>,
}

/// Append-only log of [`ThreatEvent`]s with gap-free sequence numbers.
pub struct AuditLog {
    inner: Mutex<Inner>,
}

impl Default for AuditLog {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl std::fmt::Debug for AuditLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AuditLog").field("len", &self.len()).finish()
    }
}

impl AuditLog {
    pub fn in_memory() -> Self {
        Self {
            inner: Mutex::new(Inner {
                base_seq: 0,
                entries: Vec::new(),
                mirror: None,
            }),
        }
    }

    /// Mirrors every append to `path`, opened for append. Earlier lines are
    /// not loaded; numbering continues after the highest seq in the file.
    pub fn with_file(path: impl AsRef<Path>) -> Result<Self, AuditError> {
        let path = path.as_ref();
        let last_seq = if path.exists() {
            read_audit_file(path)?.last().map_or(0, |e| e.seq)
        } else {
            0
        };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self::with_writer(file, last_seq))
    }

    pub fn with_writer(writer: impl Write + Send + 'static, start_after: u64) -> Self {
        Self {
            inner: Mutex::new(Inner {
                base_seq: start_after,
                entries: Vec::new(),
                mirror: Some(Box::new(writer)),
            }),
        }
    }

    /// Appends `event`, assigning and returning its sequence number. A mirror
    /// failure is reported after the in-memory append has already happened.
    pub fn append(&self, mut event: ThreatEvent) -> Result<u64, AuditError> {
        let mut inner = self.inner.lock();
        let seq = inner.base_seq + inner.entries.len() as u64 + 1;
        event.seq = seq;
        let line = format_line(&event);
        inner.entries.push(event);
        if let Some(w) = inner.mirror.as_mut() {
            if let Err(source) = w.write_all(line.as_bytes()).and_then(|_| w.flush()) {
                return Err(AuditError::Mirror { seq, source });
            }
        }
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entries(&self) -> Vec<ThreatEvent> {
        self.inner.lock().entries.clone()
    }

    pub fn get(&self, seq: u64) -> Option<ThreatEvent> {
        let inner = self.inner.lock();
        let idx = seq.checked_sub(inner.base_seq + 1)?;
        inner.entries.get(idx as usize).cloned()
    }

    pub fn count(&self, kind: ThreatKind) -> usize {
        self.inner
            .lock()
            .entries
            .iter()
            .filter(|e| e.kind == kind)
            .count()
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => return Err(format!("bad escape \\{}", other.map(String::from).unwrap_or_default())),
        }
    }
    Ok(out)
}

/// One audit line: `seq\tat\tkind\tsource\tdetail\n`.
pub fn format_line(e: &ThreatEvent) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\n",
        e.seq,
        e.at,
        e.kind,
        escape(&e.source),
        escape(&e.detail)
    )
}

pub fn parse_line(line: &str) -> Result<ThreatEvent, String> {
    let fields: Vec<&str> = line.trim_end_matches(['\n', '\r']).split('\t').collect();
    let [seq, at, kind, source, detail] = fields[..] else {
        return Err(format!("expected 5 fields, found {}", fields.len()));
    };
    Ok(ThreatEvent {
        seq: seq.parse().map_err(|_| format!("bad seq {seq:?}"))?,
        at: at.parse().map_err(|_| format!("bad timestamp {at:?}"))?,
        kind: kind.parse().map_err(|e: super::UnknownThreatKind| e.to_string())?,
        source: unescape(source)?,
        detail: unescape(detail)?,
    })
}

pub fn read_audit_file(path: &Path) -> Result<Vec<ThreatEvent>, AuditError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        out.push(parse_line(&line).map_err(|reason| AuditError::Parse { line: i + 1, reason })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::sync::Arc;

    fn ev(detail: &str) -> ThreatEvent {
        ThreatEvent::new(10, ThreatKind::RuleMatch, "10.0.0.1:1", detail)
    }

    #[test]
    fn first_append_is_one_and_reads_back() {
        let log = AuditLog::in_memory();
        let seq = log.append(ev("x")).unwrap();
        assert_eq!(seq, 1);
        let back = log.get(1).unwrap();
        assert_eq!(ThreatEvent { seq: 0, ..back }, ev("x"));
    }

    #[test]
    fn concurrent_appenders_get_unique_gap_free_seqs() {
        let log = Arc::new(AuditLog::in_memory());
        let handles: Vec<_> = (0..8)
            .map(|t| {
                let log = Arc::clone(&log);
                std::thread::spawn(move || {
                    (0..500)
                        .map(|i| log.append(ev(&format!("{t}-{i}"))).unwrap())
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        let mut all = HashSet::new();
        for h in handles {
            let seqs = h.join().unwrap();
            assert!(seqs.windows(2).all(|w| w[0] < w[1]));
            all.extend(seqs);
        }
        assert_eq!(all.len(), 4000);
        assert_eq!(all.iter().min(), Some(&1));
        assert_eq!(all.iter().max(), Some(&4000));
        let entries = log.entries();
        assert!(entries.iter().enumerate().all(|(i, e)| e.seq == i as u64 + 1));
    }

    #[test]
    fn line_format_escapes_and_parses() {
        let mut e = ev("tab\there\nnew \\ slash");
        e.seq = 7;
        let line = format_line(&e);
        assert_eq!(line.matches('\t').count(), 4);
        assert_eq!(line.matches('\n').count(), 1);
        assert_eq!(parse_line(&line).unwrap(), e);
    }

    #[test]
    fn file_mirror_continues_numbering() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.log");
        {
            let log = AuditLog::with_file(&path).unwrap();
            log.append(ev("a")).unwrap();
            log.append(ev("b")).unwrap();
        }
        let log = AuditLog::with_file(&path).unwrap();
        assert_eq!(log.append(ev("c")).unwrap(), 3);
        assert_eq!(log.get(3).unwrap().detail, "c");
        let on_disk = read_audit_file(&path).unwrap();
        assert_eq!(on_disk.iter().map(|e| e.seq).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    struct Broken;
    impl Write for Broken {
        fn write(&mut self, _: &[u8]) -> io::Result<usize> {
            Err(io::Error::other("disk full"))
        }
        fn flush(&mut self) -> io::Result<()> {
            Ok(())
        }
    }

    #[test]
    fn mirror_failure_reported_but_memory_append_kept() {
        let log = AuditLog::with_writer(Broken, 0);
        match log.append(ev("x")) {
            Err(AuditError::Mirror { seq: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(log.len(), 1);
        assert_eq!(log.append(ev("y")).map_err(|_| ()).unwrap_err(), ());
        assert_eq!(log.len(), 2);
    }
}
