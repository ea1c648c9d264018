//! Plain-text corpus manifests: one entry per line, `#` comments allowed.
//!
//! * training utterances: `<utterance_id> <relative_path>`
//! * noise recordings: `<relative_path> <category>`
//! * room impulse responses: `<relative_path>`

use std::fs;
use std::path::{Path, PathBuf};

use super::{wav::read_wav, AudioError, AugmentationBank, NoiseCategory, Result, Waveform};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UtteranceEntry {
    pub id: String,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NoiseEntry {
    pub path: PathBuf,
    pub category: NoiseCategory,
}

fn lines(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .enumerate()
        .filter_map(|(i, l)| {
            let l = l.trim();
            (!l.is_empty() && !l.starts_with('#'))
                .then(|| (i + 1, l.split_whitespace().map(str::to_string).collect()))
        })
        .collect())
}

fn bad_line(path: &Path, line: usize, detail: impl Into<String>) -> AudioError {
    AudioError::Manifest {
        path: path.to_path_buf(),
        line,
        detail: detail.into(),
    }
}

pub fn read_utterance_manifest(path: &Path) -> Result<Vec<UtteranceEntry>> {
    lines(path)?
        .into_iter()
        .map(|(n, f)| match f.as_slice() {
            [id, rel] => Ok(UtteranceEntry {
                id: id.clone(),
                path: PathBuf::from(rel),
            }),
            _ => Err(bad_line(path, n, "expected `<utterance_id> <relative_path>`")),
        })
        .collect()
}

pub fn write_utterance_manifest(path: &Path, entries: &[UtteranceEntry]) -> Result<()> {
    let body: String = entries
        .iter()
        .map(|e| format!("{} {}\n", e.id, e.path.display()))
        .collect();
    fs::write(path, body)?;
    Ok(())
}

pub fn read_noise_manifest(path: &Path) -> Result<Vec<NoiseEntry>> {
    lines(path)?
        .into_iter()
        .map(|(n, f)| match f.as_slice() {
            [rel, cat] => Ok(NoiseEntry {
                path: PathBuf::from(rel),
                category: cat.parse().map_err(|e: String| bad_line(path, n, e))?,
            }),
            _ => Err(bad_line(path, n, "expected `<relative_path> <category>`")),
        })
        .collect()
}

pub fn read_rir_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    lines(path)?
        .into_iter()
        .map(|(n, f)| match f.as_slice() {
            [rel] => Ok(PathBuf::from(rel)),
            _ => Err(bad_line(path, n, "expected `<relative_path>`")),
        })
        .collect()
}

/// Loads every utterance listed in `manifest`, resolving paths against `root`.
pub fn load_utterances(manifest: &Path, root: &Path) -> Result<Vec<(String, Waveform)>> {
    read_utterance_manifest(manifest)?
        .into_iter()
        .map(|e| Ok((e.id, read_wav(&root.join(&e.path))?)))
        .collect()
}

/// Builds an [`AugmentationBank`] from noise and RIR manifests under `root`.
pub fn load_bank(noise_manifest: &Path, rir_manifest: &Path, root: &Path) -> Result<AugmentationBank> {
    let noises = read_noise_manifest(noise_manifest)?
        .into_iter()
        .map(|e| Ok((e.category, read_wav(&root.join(&e.path))?)))
        .collect::<Result<Vec<_>>>()?;
    let rirs = read_rir_manifest(rir_manifest)?
        .into_iter()
        .map(|p| Ok(read_wav(&root.join(p))?.into_samples()))
        .collect::<Result<Vec<_>>>()?;
    AugmentationBank::new(noises, rirs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_three_formats_and_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let utt = dir.path().join("train.txt");
        fs::write(&utt, "# comment\nspk1-u1 spk1/u1.wav\n\nspk1-u2 spk1/u2.wav\n").unwrap();
        let entries = read_utterance_manifest(&utt).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[1].path, PathBuf::from("spk1/u2.wav"));

        let noise = dir.path().join("noise.txt");
        fs::write(&noise, "n/a.wav music\nn/b.wav babble\nn/c.wav ambient\n").unwrap();
        let cats: Vec<_> = read_noise_manifest(&noise).unwrap().into_iter().map(|e| e.category).collect();
        assert_eq!(cats, [NoiseCategory::Music, NoiseCategory::Babble, NoiseCategory::Ambient]);

        fs::write(&noise, "n/a.wav music\nn/b.wav jazz\n").unwrap();
        match read_noise_manifest(&noise) {
            Err(AudioError::Manifest { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }

        let rir = dir.path().join("rir.txt");
        fs::write(&rir, "r/1.wav\nr/2.wav extra\n").unwrap();
        assert!(matches!(read_rir_manifest(&rir), Err(AudioError::Manifest { line: 2, .. })));
    }
}
