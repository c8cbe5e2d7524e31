use std::path::{Path, PathBuf};

/// File names inside a run's output directory.
#[derive(Clone, Debug)]
pub struct RunLayout {
    root: PathBuf,
}

impl RunLayout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn lock(&self) -> PathBuf {
        self.root.join("LOCK")
    }

    /// Resolved configuration, every key listed.
    pub fn config(&self) -> PathBuf {
        self.root.join("run.cfg")
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.txt")
    }

    pub fn labels(&self) -> PathBuf {
        self.root.join("labels.txt")
    }

    /// Fold index of every line of the classification file.
    pub fn folds(&self) -> PathBuf {
        self.root.join("folds.txt")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }

    pub fn bank(&self) -> PathBuf {
        self.root.join("bank")
    }

    /// Resumable training state, rewritten every epoch.
    pub fn state(&self) -> PathBuf {
        self.root.join("state")
    }

    /// Parameters with the best validation score so far.
    pub fn best(&self) -> PathBuf {
        self.root.join("best")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join("final")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
}
