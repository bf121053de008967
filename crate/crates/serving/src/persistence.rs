//! Durable state under the data directory: the chat log (one session per
//! line, rewritten on update) and append-only JSONL logs.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::marker::PhantomData;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use localrqa::session::DialogueSession;
use serde::de::DeserializeOwned;
use serde::Serialize;

pub const CHAT_LOG: &str = "chat_sessions.jsonl";
pub const FEEDBACK_LOG: &str = "feedback.jsonl";

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> std::io::Result<Vec<T>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("{}:{}: {e}", path.display(), i + 1),
                )
            })
        })
        .collect()
}

/// All chat sessions, mirrored to a JSONL file that is rewritten atomically
/// on every update.
pub struct SessionStore {
    path: PathBuf,
    sessions: Mutex<BTreeMap<String, DialogueSession>>,
    locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
    write: Mutex<()>,
}

impl SessionStore {
    pub fn open(path: PathBuf) -> std::io::Result<Self> {
        let sessions = read_jsonl::<DialogueSession>(&path)?
            .into_iter()
            .map(|s| (s.session_id.clone(), s))
            .collect();
        Ok(SessionStore {
            path,
            sessions: Mutex::new(sessions),
            locks: Mutex::new(HashMap::new()),
            write: Mutex::new(()),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Lock that serializes turns within one session.
    pub fn session_lock(&self, session_id: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.locks
            .lock()
            .unwrap()
            .entry(session_id.to_string())
            .or_default()
            .clone()
    }

    pub fn get(&self, session_id: &str) -> Option<DialogueSession> {
        self.sessions.lock().unwrap().get(session_id).cloned()
    }

    pub fn len(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stores `session` and rewrites the log before returning.
    pub fn put(&self, session: DialogueSession) -> std::io::Result<()> {
        let _guard = self.write.lock().unwrap();
        let snapshot: Vec<String> = {
            let mut sessions = self.sessions.lock().unwrap();
            sessions.insert(session.session_id.clone(), session);
            sessions
                .values()
                .map(|s| serde_json::to_string(s).expect("sessions serialize"))
                .collect()
        };
        let tmp = self.path.with_extension("jsonl.tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            for line in &snapshot {
                f.write_all(line.as_bytes())?;
                f.write_all(b"\n")?;
            }
            f.into_inner()?.sync_all()?;
        }
        std::fs::rename(&tmp, &self.path)
    }
}

/// An append-only JSONL file; appends are serialized.
pub struct AppendLog<T> {
    path: PathBuf,
    write: Mutex<()>,
    _record: PhantomData<fn(T) -> T>,
}

impl<T: Serialize + DeserializeOwned> AppendLog<T> {
    pub fn new(path: PathBuf) -> Self {
        AppendLog {
            path,
            write: Mutex::new(()),
            _record: PhantomData,
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: &T) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(record).map_err(std::io::Error::other)?;
        line.push(b'\n');
        let _guard = self.write.lock().unwrap();
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&self.path)?;
        f.write_all(&line)?;
        f.flush()
    }

    pub fn read_all(&self) -> std::io::Result<Vec<T>> {
        let _guard = self.write.lock().unwrap();
        read_jsonl(&self.path)
    }
}

/// One [`AppendLog`] per path, created on first use.
pub struct LogRegistry<T> {
    logs: Mutex<HashMap<PathBuf, Arc<AppendLog<T>>>>,
}

impl<T> Default for LogRegistry<T> {
    fn default() -> Self {
        LogRegistry {
            logs: Mutex::new(HashMap::new()),
        }
    }
}

impl<T: Serialize + DeserializeOwned> LogRegistry<T> {
    pub fn get(&self, path: &Path) -> Arc<AppendLog<T>> {
        self.logs
            .lock()
            .unwrap()
            .entry(path.to_path_buf())
            .or_insert_with(|| Arc::new(AppendLog::new(path.to_path_buf())))
            .clone()
    }
}
