use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use pfa_core::io::{write_atomic, write_dataset_csv, write_json_atomic, write_matrix_csv};
use pfa_core::{Dataset, Result};
use serde::Serialize;

/// An output directory that removes what it wrote unless `commit` is reached.
pub struct OutputDir {
    root: PathBuf,
    created: bool,
    written: Vec<String>,
    committed: bool,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        let created = !root.exists();
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            created,
            written: Vec::new(),
            committed: false,
        })
    }

    fn track(&mut self, name: &str) -> PathBuf {
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
        self.root.join(name)
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.track(name);
        write_json_atomic(&path, value)
    }

    pub fn bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.track(name);
        write_atomic(&path, bytes)
    }

    pub fn matrix(
        &mut self,
        name: &str,
        corner: &str,
        rows: &[String],
        cols: &[String],
        m: &DMatrix<f64>,
    ) -> Result<()> {
        let path = self.track(name);
        write_matrix_csv(&path, corner, rows, cols, m)
    }

    pub fn dataset(
        &mut self,
        name: &str,
        data: &Dataset,
        group_column: Option<&str>,
    ) -> Result<()> {
        let path = self.track(name);
        write_dataset_csv(&path, data, group_column)
    }

    pub fn outputs(&self) -> &[String] {
        &self.written
    }

    /// Writes the manifest last and keeps everything.
    pub fn commit<T: Serialize>(mut self, manifest: &T) -> Result<()> {
        self.json("manifest.json", manifest)?;
        self.committed = true;
        Ok(())
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for name in &self.written {
            let _ = fs::remove_file(self.root.join(name));
        }
        if self.created {
            let _ = fs::remove_dir(&self.root);
        }
    }
}
