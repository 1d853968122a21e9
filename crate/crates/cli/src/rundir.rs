use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use cact::config::RunConfig;

use crate::failure::{Failure, EXIT_ERROR};

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const LOG_FILE: &str = "run.log";

/// `<out_dir>/<verb>-<UTC timestamp>[-n]` holding the config snapshot, the
/// log and every artifact of one invocation.
pub struct RunDir {
    pub path: PathBuf,
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::new(EXIT_ERROR, "io", format!("{}: {e}", path.display())).with("path", path.display())
}

impl RunDir {
    pub fn create(cfg: &RunConfig, verb: &str) -> Result<Self, Failure> {
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
        let base = cfg.out_dir.join(format!("{verb}-{stamp}"));
        let mut path = base.clone();
        let mut n = 1;
        while path.exists() {
            n += 1;
            path = PathBuf::from(format!("{}-{n}", base.display()));
        }
        fs::create_dir_all(&path).map_err(|e| io_failure(&path, e))?;
        let snap = path.join(CONFIG_SNAPSHOT);
        fs::write(&snap, cfg.to_toml()).map_err(|e| io_failure(&snap, e))?;
        let log = path.join(LOG_FILE);
        let file = File::create(&log).map_err(|e| io_failure(&log, e))?;
        init_logging(file);
        Ok(Self { path })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Appends the error line to the log without echoing it to stderr twice.
    pub fn record_failure(&self, f: &Failure) {
        let p = self.file(LOG_FILE);
        if let Ok(mut log) = fs::OpenOptions::new().append(true).open(&p) {
            let _ = writeln!(log, "{}", f.line());
        }
    }

    pub fn create_file(&self, name: &str) -> Result<File, Failure> {
        let p = self.file(name);
        File::create(&p).map_err(|e| io_failure(&p, e))
    }
}

/// Log lines go to stderr and to the run's log file.
struct Tee(Mutex<File>);

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stderr().write_all(buf)?;
        self.0.lock().expect("log file").write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        std::io::stderr().flush()?;
        self.0.lock().expect("log file").flush()
    }
}

fn init_logging(file: File) {
    let env = env_logger::Env::new().filter_or("CACT_LOG", "info");
    let _ = env_logger::Builder::from_env(env)
        .target(env_logger::Target::Pipe(Box::new(Tee(Mutex::new(file)))))
        .format_timestamp_secs()
        .try_init();
}
