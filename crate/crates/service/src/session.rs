//! Labeling sessions and their append-only event log.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sigmine_core::eval::{next_unlabeled, run_query, QuerySet, RankedPrediction, Representation, SearchSpace};
use sigmine_core::{Error, MihIndex, Result, Signature, VoxelCoord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionSettings {
    pub rank_n: usize,
    pub t: f64,
    pub k: usize,
}

impl SessionSettings {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.rank_n == 0 || self.rank_n > self.k {
            return Err(Error::InvalidArgument(format!(
                "need 1 <= rank_n <= k, got rank_n {} and k {}",
                self.rank_n, self.k
            )));
        }
        if !(self.t > 0.0) || !self.t.is_finite() {
            return Err(Error::InvalidArgument(format!("t must be positive, got {}", self.t)));
        }
        Ok(())
    }
}

/// A query-set member as it is logged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Seed {
    pub source: Option<VoxelCoord>,
    pub signature: Signature,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub coord: VoxelCoord,
    pub label: bool,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

/// One line of the session log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SessionEvent {
    Create {
        session: u64,
        settings: SessionSettings,
        seeds: Vec<Seed>,
    },
    Label {
        session: u64,
        entry: LabelEntry,
        /// Signature stored at the labeled site.
        signature: Signature,
    },
}

/// Rejection of a label that would repeat an earlier one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlreadyLabeled(pub VoxelCoord);

#[derive(Debug, Clone)]
pub struct Session {
    pub id: u64,
    pub settings: SessionSettings,
    queries: QuerySet,
    labels: Vec<LabelEntry>,
    labeled: HashSet<VoxelCoord>,
    ranking: Option<Vec<RankedPrediction>>,
}

impl Session {
    pub fn new(id: u64, settings: SessionSettings, seeds: &[Seed]) -> Result<Self> {
        settings.validate()?;
        let (first, rest) = seeds
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("a session needs at least one seed".into()))?;
        let mut queries = QuerySet::new(first.source, Representation::Signature(first.signature));
        for s in rest {
            queries.push(s.source, Representation::Signature(s.signature))?;
        }
        Ok(Session {
            id,
            settings,
            queries,
            labels: Vec::new(),
            labeled: HashSet::new(),
            ranking: None,
        })
    }

    pub fn queries(&self) -> &QuerySet {
        &self.queries
    }

    pub fn labels(&self) -> &[LabelEntry] {
        &self.labels
    }

    pub fn true_labels(&self) -> usize {
        self.labels.iter().filter(|l| l.label).count()
    }

    /// Whether `c` was labeled or is a seed location.
    pub fn is_labeled(&self, c: VoxelCoord) -> bool {
        self.labeled.contains(&c) || self.queries.contains_source(c)
    }

    /// Records a label at a stored site. A true label adds the site's
    /// signature to the query set.
    pub fn apply_label(&mut self, entry: LabelEntry, signature: Signature) -> std::result::Result<(), AlreadyLabeled> {
        if self.is_labeled(entry.coord) {
            return Err(AlreadyLabeled(entry.coord));
        }
        if entry.label {
            self.queries
                .push(Some(entry.coord), Representation::Signature(signature))
                .map_err(|_| AlreadyLabeled(entry.coord))?;
            self.ranking = None;
        }
        self.labeled.insert(entry.coord);
        self.labels.push(entry);
        Ok(())
    }

    /// Current ranking, recomputed only after the query set changed.
    pub fn ranking(&mut self, index: &MihIndex) -> Result<&[RankedPrediction]> {
        if self.ranking.is_none() {
            let r = run_query(
                SearchSpace::Index(index),
                &self.queries,
                self.settings.t,
                self.settings.k,
            )?;
            self.ranking = Some(r);
        }
        Ok(self.ranking.as_deref().unwrap_or_default())
    }

    /// First unlabeled prediction at rank `rank_n` or later.
    pub fn next(&mut self, index: &MihIndex, rank_n: usize) -> Result<Option<RankedPrediction>> {
        if rank_n == 0 || rank_n > self.settings.k {
            return Err(Error::InvalidArgument(format!(
                "rank_n must be in 1..={}, got {rank_n}",
                self.settings.k
            )));
        }
        let mut skip = self.labeled.clone();
        skip.extend(self.queries.members().iter().filter_map(|m| m.source));
        let ranking = self.ranking(index)?;
        Ok(next_unlabeled(ranking, rank_n, &skip).copied())
    }
}

/// Rebuilds sessions from logged events, in order.
pub fn replay(events: &[SessionEvent]) -> Result<BTreeMap<u64, Session>> {
    let mut sessions = BTreeMap::new();
    for (line, ev) in events.iter().enumerate() {
        match ev {
            SessionEvent::Create {
                session,
                settings,
                seeds,
            } => {
                if sessions.contains_key(session) {
                    return Err(Error::Format(format!(
                        "event {}: session {session} created twice",
                        line + 1
                    )));
                }
                sessions.insert(*session, Session::new(*session, *settings, seeds)?);
            }
            SessionEvent::Label {
                session,
                entry,
                signature,
            } => {
                let s = sessions
                    .get_mut(session)
                    .ok_or_else(|| Error::Format(format!("event {}: unknown session {session}", line + 1)))?;
                s.apply_label(*entry, *signature)
                    .map_err(|AlreadyLabeled(c)| Error::Format(format!("event {}: {c} labeled twice", line + 1)))?;
            }
        }
    }
    Ok(sessions)
}

/// Append-only JSON-lines log of session events.
#[derive(Debug)]
pub struct SessionLog {
    path: PathBuf,
    file: File,
}

impl SessionLog {
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
        Ok(SessionLog {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, ev: &SessionEvent) -> Result<()> {
        let mut line = serde_json::to_string(ev).map_err(|e| Error::Format(e.to_string()))?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::Io {
                path: self.path.clone(),
                source: e,
            })
    }
}

/// Reads every event of a log; a missing file reads as empty.
pub fn read_log(path: &Path) -> Result<Vec<SessionEvent>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => {
            return Err(Error::Io {
                path: path.to_path_buf(),
                source: e,
            })
        }
    };
    let mut events = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings() -> SessionSettings {
        SessionSettings {
            rank_n: 1,
            t: 1.5,
            k: 10,
        }
    }

    fn seed(x: u32, bits: u64) -> Seed {
        Seed {
            source: Some(VoxelCoord::new(x, 0, 0)),
            signature: Signature(bits),
        }
    }

    fn label(x: u32, label: bool) -> LabelEntry {
        LabelEntry {
            coord: VoxelCoord::new(x, 0, 0),
            label,
            timestamp: 0,
        }
    }

    #[test]
    fn true_labels_grow_the_query_set_and_repeats_are_refused() {
        let mut s = Session::new(1, settings(), &[seed(0, 0)]).unwrap();
        s.apply_label(label(4, false), Signature(1)).unwrap();
        s.apply_label(label(8, true), Signature(3)).unwrap();
        assert_eq!(s.queries().len(), 2);
        assert_eq!(
            s.apply_label(label(8, false), Signature(3)),
            Err(AlreadyLabeled(VoxelCoord::new(8, 0, 0)))
        );
        assert_eq!(
            s.apply_label(label(0, true), Signature(0)),
            Err(AlreadyLabeled(VoxelCoord::new(0, 0, 0)))
        );
        assert_eq!(s.labels().len(), 2);
    }

    #[test]
    fn next_skips_seeds_and_labels_and_tracks_the_query_set() {
        let records: Vec<_> = (0..6u32)
            .map(|i| {
                sigmine_core::SignatureRecord::new(VoxelCoord::new(4 * i, 0, 0), Signature(((1u64 << i) - 1) << 10))
            })
            .collect();
        let index = MihIndex::build(records.clone(), 2, 0).unwrap();
        let mut s = Session::new(
            1,
            settings(),
            &[Seed {
                source: Some(records[0].coord),
                signature: records[0].sig,
            }],
        )
        .unwrap();
        let first = s.next(&index, 1).unwrap().unwrap();
        assert_eq!(first.coord, records[1].coord);
        s.apply_label(label(4, true), records[1].sig).unwrap();
        let next = s.next(&index, 1).unwrap().unwrap();
        assert_eq!(next.coord, records[2].coord);
        assert_eq!(next.distance, 1.0);
        assert!(s.next(&index, 11).is_err());
    }

    #[test]
    fn log_round_trips_and_replays() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let events = vec![
            SessionEvent::Create {
                session: 3,
                settings: settings(),
                seeds: vec![seed(0, 7)],
            },
            SessionEvent::Label {
                session: 3,
                entry: label(4, true),
                signature: Signature(9),
            },
            SessionEvent::Label {
                session: 3,
                entry: label(6, false),
                signature: Signature(2),
            },
        ];
        let mut log = SessionLog::open(&path).unwrap();
        for e in &events {
            log.append(e).unwrap();
        }
        assert_eq!(read_log(&path).unwrap(), events);
        let sessions = replay(&events).unwrap();
        assert_eq!(sessions[&3].queries().len(), 2);
        assert_eq!(sessions[&3].labels().len(), 2);
        assert!(replay(&events[1..]).is_err());
        assert!(read_log(&dir.path().join("absent")).unwrap().is_empty());
    }
}
