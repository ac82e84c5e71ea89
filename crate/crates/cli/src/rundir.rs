//! Run directories: single-writer lock, append-only loss log and epoch checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use vaemo::checkpoint::Checkpoint;
use vaemo::config::TrainConfig;
use vaemo::error::{Error, Result};
use vaemo::train::{LossLog, Run};

pub const LOCK_FILE: &str = ".lock";
pub const LOSS_FILE: &str = "loss.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Holds `<run>/.lock` until dropped.
pub struct RunDir {
    pub path: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    pub fn open(path: &Path) -> Result<Self> {
        fs::create_dir_all(path.join(CHECKPOINT_DIR)).map_err(|e| Error::io(path, e))?;
        let lock = path.join(LOCK_FILE);
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => Error::Data(format!(
                    "run directory {} is locked by another process (remove {} if stale)",
                    path.display(),
                    lock.display()
                )),
                _ => Error::io(&lock, e),
            })?;
        writeln!(f, "{}", std::process::id()).map_err(|e| Error::io(&lock, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            lock,
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.path
            .join(CHECKPOINT_DIR)
            .join(format!("epoch-{epoch:04}.vaem"))
    }

    /// Latest epoch checkpoint, if any.
    pub fn latest_checkpoint(&self) -> Result<Option<PathBuf>> {
        let dir = self.path.join(CHECKPOINT_DIR);
        let mut best: Option<(usize, PathBuf)> = None;
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let p = entry.map_err(|e| Error::io(&dir, e))?.path();
            let epoch = p
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("epoch-"))
                .and_then(|n| n.strip_suffix(".vaem"))
                .and_then(|n| n.parse::<usize>().ok());
            if let Some(e) = epoch {
                if best.as_ref().is_none_or(|(b, _)| e > *b) {
                    best = Some((e, p));
                }
            }
        }
        Ok(best.map(|(_, p)| p))
    }

    /// Starts `loss.csv` afresh, or keeps only the rows before `resume_step`.
    pub fn reset_loss_log(&self, log: &LossLog, resume_step: Option<u64>) -> Result<()> {
        let path = self.file(LOSS_FILE);
        let mut text = log.header();
        if let (Some(step), Ok(old)) = (resume_step, fs::read_to_string(&path)) {
            for line in old.lines().skip(1) {
                let row_step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
                if row_step.is_some_and(|s| s < step) {
                    text.push_str(line);
                    text.push('\n');
                }
            }
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn append_loss_rows(&self, rows: &[(u64, Vec<f32>, f32)]) -> Result<()> {
        let path = self.file(LOSS_FILE);
        let mut f = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let text: String = rows.iter().map(LossLog::row_csv).collect();
        f.write_all(text.as_bytes())
            .map_err(|e| Error::io(&path, e))
    }

    /// Epoch callback: log rows of the finished epoch, then checkpoint.
    pub fn epoch_writer<'a>(&'a self, cfg: &'a TrainConfig) -> impl FnMut(&Run) -> Result<()> + 'a {
        let mut written = 0;
        move |run: &Run| {
            self.append_loss_rows(&run.log.rows[written..])?;
            written = run.log.rows.len();
            run.checkpoint(cfg).save(&self.epoch_checkpoint(run.epoch))
        }
    }

    /// Resumes from the latest epoch checkpoint when asked and one exists.
    pub fn start(&self, fresh: Run, cfg: &TrainConfig, resume: bool) -> Result<Run> {
        let latest = if resume {
            self.latest_checkpoint()?
        } else {
            None
        };
        match latest {
            Some(path) => {
                let ckpt = Checkpoint::load(&path)?;
                ckpt.check_compatible(&cfg.model)?;
                if ckpt.meta.stage != cfg.stage {
                    return Err(Error::Config(format!(
                        "{} holds a `{}` run, not `{}`",
                        path.display(),
                        ckpt.meta.stage.name(),
                        cfg.stage.name()
                    )));
                }
                self.reset_loss_log(&fresh.log, Some(ckpt.meta.global_step))?;
                let columns: Vec<&str> = fresh.log.columns.iter().map(String::as_str).collect();
                Ok(Run::resume(ckpt, &columns))
            }
            None => {
                self.reset_loss_log(&fresh.log, None)?;
                Ok(fresh)
            }
        }
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunDir::open(dir.path()).unwrap();
        assert!(matches!(RunDir::open(dir.path()), Err(Error::Data(_))));
        drop(a);
        RunDir::open(dir.path()).unwrap();
    }

    #[test]
    fn loss_log_trims_on_resume() {
        let dir = tempfile::tempdir().unwrap();
        let rd = RunDir::open(dir.path()).unwrap();
        let log = LossLog::new(&["total"]);
        rd.reset_loss_log(&log, None).unwrap();
        rd.append_loss_rows(&[
            (0, vec![1.0], 0.1),
            (1, vec![0.5], 0.1),
            (2, vec![0.25], 0.1),
        ])
        .unwrap();
        rd.reset_loss_log(&log, Some(2)).unwrap();
        let text = fs::read_to_string(rd.file(LOSS_FILE)).unwrap();
        assert_eq!(text, "step,total,lr\n0,1,0.1\n1,0.5,0.1\n");
    }

    #[test]
    fn latest_checkpoint_by_epoch_number() {
        let dir = tempfile::tempdir().unwrap();
        let rd = RunDir::open(dir.path()).unwrap();
        assert!(rd.latest_checkpoint().unwrap().is_none());
        for e in [2, 10, 9] {
            fs::write(rd.epoch_checkpoint(e), b"x").unwrap();
        }
        assert_eq!(
            rd.latest_checkpoint().unwrap().unwrap(),
            rd.epoch_checkpoint(10)
        );
    }
}
