use std::path::Path;
use std::time::Duration;

use udcvr::kv::KvMap;

pub const RUN_MANIFEST: &str = "run_manifest.txt";

/// Record of one command invocation, written beside its outputs.
pub struct RunManifest {
    entries: KvMap,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        let mut entries = KvMap::new();
        entries.insert("command", command);
        entries.insert("version", env!("CARGO_PKG_VERSION"));
        Self { entries }
    }

    pub fn flag(&mut self, name: &str, value: impl std::fmt::Display) -> &mut Self {
        self.entries.insert(&format!("flag.{name}"), value);
        self
    }

    pub fn path(&mut self, role: &str, p: &Path) -> &mut Self {
        self.entries.insert(&format!("path.{role}"), p.display());
        self
    }

    pub fn write(mut self, dir: &Path, elapsed: Duration) -> udcvr::Result<()> {
        self.entries
            .insert("duration_secs", format!("{:.3}", elapsed.as_secs_f64()));
        self.entries.save(&dir.join(RUN_MANIFEST))
    }
}
