//! Output directories, config assembly and dataset loading.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use relagg_core::config::KvConfig;
use relagg_core::event_store::{load_events, read_dictionary, read_groups, LoadOptions, VariableDictionary};
use relagg_core::EventWindow;

use crate::{Common, Failure};

pub const EVENTS: &str = "events.csv";
pub const LABELS: &str = "labels.csv";
pub const VARIABLES: &str = "variables.txt";
pub const GROUPS: &str = "groups.csv";
pub const SNAPSHOT: &str = "effective.cfg";
const LOCK: &str = ".relagg.lock";

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

/// An output directory owned by this process until dropped.
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn claim(root: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(root).map_err(|e| io_failure(root, e))?;
        let lock = root.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => Ok(Self { root: root.to_path_buf() }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Failure::Runtime(format!(
                "{} is locked by another run (remove {} if that run is gone)",
                root.display(),
                lock.display()
            ))),
            Err(e) => Err(io_failure(&lock, e)),
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<(), Failure> {
        let p = self.path(name);
        fs::write(&p, contents).map_err(|e| io_failure(&p, e))?;
        log::info!("wrote {}", p.display());
        Ok(())
    }

    pub fn snapshot(&self, kv: &KvConfig) -> Result<(), Failure> {
        self.write(SNAPSHOT, &kv.render())
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.root.join(LOCK));
    }
}

/// Config file, then `--set` overrides, then dedicated flags.
pub fn assemble(common: &Common, flags: &[(&str, Option<String>)]) -> Result<KvConfig, Failure> {
    let mut kv = match &common.config {
        Some(p) => KvConfig::load(p).map_err(|e| Failure::Usage(e.to_string()))?,
        None => KvConfig::new(),
    };
    kv.apply_overrides(&common.set).map_err(|e| Failure::Usage(e.to_string()))?;
    for (k, v) in flags {
        if let Some(v) = v {
            kv.set(k, v);
        }
    }
    Ok(kv)
}

pub struct Dataset {
    pub windows: Vec<EventWindow>,
    pub dict: VariableDictionary,
    pub groups: Vec<String>,
}

pub fn load_dataset(dir: &Path, opts: &LoadOptions) -> Result<Dataset, Failure> {
    let dict = read_dictionary(&dir.join(VARIABLES))?;
    let windows = load_events(&dir.join(EVENTS), &dir.join(LABELS), &dict, opts)?;
    if windows.is_empty() {
        return Err(Failure::Runtime(format!("no usable patients in {}", dir.display())));
    }
    let groups_path = dir.join(GROUPS);
    let groups = if groups_path.exists() {
        read_groups(&groups_path, &dict)?
    } else {
        vec!["other".to_string(); dict.len()]
    };
    log::info!("loaded {} patients with {} variables from {}", windows.len(), dict.len(), dir.display());
    Ok(Dataset { windows, dict, groups })
}
