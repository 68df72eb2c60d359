//! Zip archives of `.npy` arrays plus JSON documents, written with fixed
//! timestamps and no compression so equal contents give equal bytes.

use std::io::{Read, Seek, Write};
use std::path::Path;

use ndarray::{ArrayD, ArrayViewD};
use ndarray_npy::{ReadNpyExt, WriteNpyExt};
use serde::de::DeserializeOwned;
use serde::Serialize;
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, DateTime, ZipArchive, ZipWriter};

use crate::error::{Error, Result};
use crate::model::ParamSet;

pub(crate) struct ArchiveWriter<W: Write + Seek> {
    zip: ZipWriter<W>,
    opts: SimpleFileOptions,
}

impl<W: Write + Seek> ArchiveWriter<W> {
    pub fn new(writer: W) -> Self {
        Self {
            zip: ZipWriter::new(writer),
            opts: SimpleFileOptions::default()
                .compression_method(CompressionMethod::Stored)
                .last_modified_time(DateTime::default()),
        }
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.zip.start_file(name, self.opts).map_err(zip_err)?;
        self.zip
            .write_all(serde_json::to_string_pretty(value)?.as_bytes())
            .map_err(|e| Error::Serde(format!("writing `{name}`: {e}")))
    }

    pub fn array(&mut self, name: &str, a: ArrayViewD<'_, f64>) -> Result<()> {
        self.zip
            .start_file(format!("{name}.npy"), self.opts)
            .map_err(zip_err)?;
        a.write_npy(&mut self.zip)
            .map_err(|e| Error::Serde(format!("writing `{name}`: {e}")))
    }

    pub fn params<P: ParamSet>(&mut self, prefix: &str, params: &P) -> Result<()> {
        for (name, a) in params.arrays() {
            self.array(&format!("{prefix}/{name}"), a)?;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        self.zip.finish().map_err(zip_err)?;
        Ok(())
    }
}

pub(crate) struct ArchiveReader<R: Read + Seek> {
    zip: ZipArchive<R>,
}

impl<R: Read + Seek> ArchiveReader<R> {
    pub fn new(reader: R) -> Result<Self> {
        Ok(Self {
            zip: ZipArchive::new(reader).map_err(zip_err)?,
        })
    }

    pub fn json<T: DeserializeOwned>(&mut self, name: &str) -> Result<T> {
        let mut text = String::new();
        self.zip
            .by_name(name)
            .map_err(|e| Error::Serde(format!("`{name}`: {e}")))?
            .read_to_string(&mut text)
            .map_err(|e| Error::Serde(format!("`{name}`: {e}")))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn array(&mut self, name: &str) -> Result<ArrayD<f64>> {
        let file = self
            .zip
            .by_name(&format!("{name}.npy"))
            .map_err(|e| Error::Serde(format!("array `{name}`: {e}")))?;
        ArrayD::<f64>::read_npy(file).map_err(|e| Error::Serde(format!("array `{name}`: {e}")))
    }

    /// Overwrite every array of `target` from `<prefix>/<name>.npy`.
    pub fn fill<P: ParamSet>(&mut self, prefix: &str, target: &mut P) -> Result<()> {
        let names: Vec<String> = target.arrays().into_iter().map(|(n, _)| n).collect();
        for (name, mut dst) in names.iter().zip(target.arrays_mut()) {
            let full = format!("{prefix}/{name}");
            let src = self.array(&full)?;
            if src.shape() != dst.shape() {
                return Err(Error::Serde(format!(
                    "array `{full}` has shape {:?}, expected {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.assign(&src);
        }
        Ok(())
    }
}

fn zip_err(e: zip::result::ZipError) -> Error {
    Error::Serde(format!("archive: {e}"))
}

/// Name the file in archive errors.
pub(crate) fn in_file(e: Error, path: &Path) -> Error {
    match e {
        Error::Serde(msg) => Error::Serde(format!("{}: {msg}", path.display())),
        other => other,
    }
}
