//! On-disk dataset layout.
//!
//! `root/manifest.tsv` lists one trial per row:
//! `trial_id subject_id condition attended eeg_file env_a_file env_b_file`
//! (tab separated, optional header row). Each data file is a 16-byte header
//! (`CLAD`, rows, cols, sample rate in mHz, all u32 little-endian) followed by
//! a row-major little-endian `f32` payload.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::{DatasetError, Result, TrialRecording};
use crate::sigproc::{MultiChannelRecording, Waveform};

pub const MANIFEST_NAME: &str = "manifest.tsv";
const MAGIC: &[u8; 4] = b"CLAD";
const HEADER_LEN: usize = 16;
const MANIFEST_HEADER: &str = "trial_id\tsubject_id\tcondition\tattended\teeg_file\tenv_a_file\tenv_b_file";

/// Decoded data file.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixFile {
    pub data: Array2<f32>,
    pub fs_mhz: u32,
}

impl MatrixFile {
    pub fn fs(&self) -> f64 {
        self.fs_mhz as f64 / 1000.0
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (rows, cols) = self.data.dim();
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * rows * cols);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(rows as u32).to_le_bytes());
        out.extend_from_slice(&(cols as u32).to_le_bytes());
        out.extend_from_slice(&self.fs_mhz.to_le_bytes());
        for v in self.data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| DatasetError::Corrupt { path: path.to_path_buf(), reason };
        if bytes.len() < HEADER_LEN {
            return Err(corrupt(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let (rows, cols, fs_mhz) = (word(4) as usize, word(8) as usize, word(12));
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| corrupt(format!("header {rows}x{cols} overflows")))?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != expected {
            return Err(corrupt(format!(
                "header declares {rows}x{cols} f32 ({expected} bytes) but payload has {} bytes",
                payload.len()
            )));
        }
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let data = Array2::from_shape_vec((rows, cols), values).map_err(|e| corrupt(e.to_string()))?;
        Ok(Self { data, fs_mhz })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            DatasetError::NotFound(path.to_path_buf())
        } else {
            DatasetError::Io { path: path.to_path_buf(), source }
        }
    }
}

pub fn read_matrix(path: &Path) -> Result<MatrixFile> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    MatrixFile::from_bytes(&bytes, path)
}

pub fn write_matrix(path: &Path, data: &Array2<f64>, fs: f64) -> Result<()> {
    let file = MatrixFile { data: data.mapv(|v| v as f32), fs_mhz: (fs * 1000.0).round() as u32 };
    fs::write(path, file.to_bytes()).map_err(io_err(path))
}

struct ManifestRow {
    trial_id: String,
    subject_id: String,
    condition: String,
    attended: u8,
    files: [String; 3],
}

fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestRow>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') || (lineno == 0 && line.starts_with("trial_id\t")) {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 7 {
            return Err(DatasetError::Corrupt {
                path: path.to_path_buf(),
                reason: format!("line {}: expected 7 tab-separated fields, got {}", lineno + 1, cols.len()),
            });
        }
        let attended = match cols[3] {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(DatasetError::Corrupt {
                    path: path.to_path_buf(),
                    reason: format!("line {}: attended must be 0 or 1, got `{other}`", lineno + 1),
                })
            }
        };
        rows.push(ManifestRow {
            trial_id: cols[0].to_string(),
            subject_id: cols[1].to_string(),
            condition: cols[2].to_string(),
            attended,
            files: [cols[4].to_string(), cols[5].to_string(), cols[6].to_string()],
        });
    }
    Ok(rows)
}

fn channel_names(root: &Path, n: usize) -> Result<Vec<String>> {
    let path = root.join("channels.txt");
    match fs::read_to_string(&path) {
        Ok(text) => {
            let names: Vec<String> =
                text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
            if names.len() != n {
                return Err(DatasetError::Corrupt {
                    path,
                    reason: format!("{} channel names for {n} EEG rows", names.len()),
                });
            }
            Ok(names)
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok((0..n).map(|i| format!("ch{i}")).collect()),
        Err(source) => Err(DatasetError::Io { path, source }),
    }
}

fn load_trial(root: &Path, row: &ManifestRow, aligned: bool) -> Result<TrialRecording> {
    let paths: Vec<PathBuf> = row.files.iter().map(|f| root.join(f)).collect();
    let eeg = read_matrix(&paths[0])?;
    let env_a = read_matrix(&paths[1])?;
    let env_b = read_matrix(&paths[2])?;
    for (m, p) in [(&env_a, &paths[1]), (&env_b, &paths[2])] {
        if m.data.nrows() != 1 {
            return Err(DatasetError::Corrupt {
                path: p.clone(),
                reason: format!("envelope must have 1 row, found {}", m.data.nrows()),
            });
        }
    }
    let names = channel_names(root, eeg.data.nrows())?;
    let corrupt = |p: &Path, e: String| DatasetError::Corrupt { path: p.to_path_buf(), reason: e };
    let eeg_rec = MultiChannelRecording::new(eeg.data.mapv(f64::from), eeg.fs(), names)
        .map_err(|e| corrupt(&paths[0], e.to_string()))?;
    let wave = |m: &MatrixFile, p: &Path| {
        Waveform::new(m.data.row(0).iter().map(|&v| f64::from(v)).collect(), m.fs())
            .map_err(|e| corrupt(p, e.to_string()))
    };
    let trial = TrialRecording {
        trial_id: row.trial_id.clone(),
        subject_id: row.subject_id.clone(),
        condition: row.condition.clone(),
        eeg: eeg_rec,
        env_a: wave(&env_a, &paths[1])?,
        env_b: wave(&env_b, &paths[2])?,
        attended: row.attended,
    };
    if aligned {
        trial.validate().map_err(|e| corrupt(&paths[0], e))?;
    }
    Ok(trial)
}

/// Read every trial listed in `root/manifest.tsv`.
pub fn load_dataset(root: &Path) -> Result<Vec<TrialRecording>> {
    load(root, true)
}

/// Same layout, but the EEG and the two audio files keep their own sample
/// rates and lengths: `env_a`/`env_b` hold the presented speech waveforms.
/// Input of the preprocessing step.
pub fn load_raw_dataset(root: &Path) -> Result<Vec<TrialRecording>> {
    load(root, false)
}

fn load(root: &Path, aligned: bool) -> Result<Vec<TrialRecording>> {
    let manifest = root.join(MANIFEST_NAME);
    let text = fs::read_to_string(&manifest).map_err(io_err(&manifest))?;
    let rows = parse_manifest(&text, &manifest)?;
    let mut seen = std::collections::HashSet::new();
    for r in &rows {
        if !seen.insert(r.trial_id.as_str()) {
            return Err(DatasetError::Corrupt {
                path: manifest.clone(),
                reason: format!("duplicate trial id `{}`", r.trial_id),
            });
        }
    }
    let loaded = crate::par::Exec::default().map(&rows, |r| load_trial(root, r, aligned));
    loaded.into_iter().collect()
}

/// Write trials and their manifest under `root`, creating it if needed.
pub fn write_dataset(root: &Path, trials: &[TrialRecording]) -> Result<()> {
    for t in trials {
        t.validate().map_err(DatasetError::InvalidArgument)?;
    }
    write(root, trials)
}

/// [`write_dataset`] for trials whose audio is not aligned with the EEG, as
/// read back by [`load_raw_dataset`].
pub fn write_raw_dataset(root: &Path, trials: &[TrialRecording]) -> Result<()> {
    for t in trials {
        if t.attended > 1 {
            return Err(DatasetError::InvalidArgument(format!("attended index {} is not 0 or 1", t.attended)));
        }
    }
    write(root, trials)
}

fn write(root: &Path, trials: &[TrialRecording]) -> Result<()> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    let manifest_path = root.join(MANIFEST_NAME);
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for t in trials {
        let files = [
            format!("{}_eeg.clad", t.trial_id),
            format!("{}_env_a.clad", t.trial_id),
            format!("{}_env_b.clad", t.trial_id),
        ];
        write_matrix(&root.join(&files[0]), &t.eeg.data, t.eeg.fs)?;
        for (env, f) in [(&t.env_a, &files[1]), (&t.env_b, &files[2])] {
            let row = Array2::from_shape_vec((1, env.len()), env.samples.clone()).expect("row vector");
            write_matrix(&root.join(f), &row, env.fs)?;
        }
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            t.trial_id, t.subject_id, t.condition, t.attended, files[0], files[1], files[2]
        ));
    }
    if let Some(first) = trials.first() {
        let names = first.eeg.channel_names.join("\n") + "\n";
        let path = root.join("channels.txt");
        fs::File::create(&path).and_then(|mut f| f.write_all(names.as_bytes())).map_err(io_err(&path))?;
    }
    fs::write(&manifest_path, manifest).map_err(io_err(&manifest_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_manifest_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(DatasetError::NotFound(_))));
    }

    #[test]
    fn empty_manifest_gives_no_trials() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST_NAME), format!("{MANIFEST_HEADER}\n")).unwrap();
        assert!(load_dataset(dir.path()).unwrap().is_empty());
        fs::write(dir.path().join(MANIFEST_NAME), "").unwrap();
        assert!(load_dataset(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn short_payload_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.clad");
        let mut bytes = MatrixFile { data: Array2::zeros((64, 640)), fs_mhz: 64_000 }.to_bytes();
        bytes.truncate(bytes.len() - 64 * 4);
        fs::write(&path, bytes).unwrap();
        match read_matrix(&path) {
            Err(DatasetError::Corrupt { path: p, reason }) => {
                assert_eq!(p, path);
                assert!(reason.contains("64x640"), "{reason}");
            }
            other => panic!("expected corrupt-file error, got {other:?}"),
        }
    }

    #[test]
    fn header_layout_is_little_endian() {
        let m = MatrixFile { data: Array2::from_elem((2, 3), 1.5f32), fs_mhz: 64_000 };
        let b = m.to_bytes();
        assert_eq!(&b[..4], b"CLAD");
        assert_eq!(&b[4..8], &[2, 0, 0, 0]);
        assert_eq!(&b[8..12], &[3, 0, 0, 0]);
        assert_eq!(&b[12..16], &64_000u32.to_le_bytes());
        assert_eq!(&b[16..20], &1.5f32.to_le_bytes());
        assert_eq!(b.len(), 16 + 24);
        assert_eq!(MatrixFile::from_bytes(&b, Path::new("m")).unwrap(), m);
    }

    #[test]
    fn bad_attended_value() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST_NAME), "t\ts\tc\t2\ta\tb\tc\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(DatasetError::Corrupt { .. })));
    }
}
