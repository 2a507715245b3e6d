//! JSONL corpus manifests.
//!
//! One JSON object per line, in ascending `sample_id` order. Pixels are not
//! stored inline: `frames_ref` is either `seed:<n>` (re-rendered by the
//! synthetic generator whose settings live in a `generator.json` next to the
//! manifest) or a path to a raw tensor file relative to the manifest.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::render_sample;
use super::tensorfile::{read_tensor_file, write_tensor_file, RawTensor};
use super::{Corpus, Domain, Frames, FramesRef, Sample, SynthConfig};
use crate::error::{CopeError, Result};

/// File name of the generator settings stored beside synthetic manifests.
pub const GENERATOR_SIDECAR: &str = "generator.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    sample_id: String,
    product_id: String,
    category_id: u32,
    domain: Domain,
    frames_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text_tokens: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gen_seed: Option<u64>,
}

fn manifest_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

pub fn save_manifest(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for s in corpus.samples() {
        let record = Record {
            sample_id: s.sample_id.clone(),
            product_id: s.product_id.clone(),
            category_id: s.category_id,
            domain: s.domain,
            frames_ref: s.frames_ref.to_string(),
            text_tokens: s.text_tokens.clone(),
            gen_seed: s.gen_seed,
        };
        serde_json::to_writer(&mut out, &record).map_err(|e| CopeError::Format(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    if let Some(cfg) = corpus.generator() {
        let json = serde_json::to_string_pretty(cfg).map_err(|e| CopeError::Format(e.to_string()))?;
        fs::write(manifest_dir(path).join(GENERATOR_SIDECAR), json + "\n")?;
    }
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Corpus> {
    let dir = manifest_dir(path);
    let reader = BufReader::new(fs::File::open(path)?);
    let mut records = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| CopeError::Parse {
            line: n + 1,
            reason: e.to_string(),
        })?;
        let frames_ref: FramesRef = record.frames_ref.parse().map_err(|e: CopeError| CopeError::Parse {
            line: n + 1,
            reason: e.to_string(),
        })?;
        records.push((n + 1, record, frames_ref));
    }

    let sidecar = dir.join(GENERATOR_SIDECAR);
    let needs_generator = records
        .iter()
        .any(|(_, _, r)| matches!(r, FramesRef::Seed(_)));
    let generator: Option<SynthConfig> = if sidecar.exists() {
        let text = fs::read_to_string(&sidecar)?;
        let cfg: SynthConfig =
            serde_json::from_str(&text).map_err(|e| CopeError::Format(format!("{}: {e}", sidecar.display())))?;
        cfg.validate()?;
        Some(cfg)
    } else if needs_generator {
        return Err(CopeError::Format(format!(
            "manifest uses seed references but {} is missing",
            sidecar.display()
        )));
    } else {
        None
    };

    let mut samples = Vec::with_capacity(records.len());
    for (line, r, frames_ref) in records {
        let frames = match &frames_ref {
            FramesRef::Seed(seed) => render_sample(
                generator.as_ref().expect("checked above"),
                &r.product_id,
                r.category_id,
                r.domain,
                *seed,
            )?,
            FramesRef::Path(rel) => {
                let raw = read_tensor_file(&dir.join(rel))?;
                let [t, h, w, c] = raw.dims;
                if c != 3 {
                    return Err(CopeError::Parse {
                        line,
                        reason: format!("{rel}: expected 3 channels, found {c}"),
                    });
                }
                Frames::new(t as usize, h as usize, w as usize, raw.data).map_err(|e| CopeError::Parse {
                    line,
                    reason: format!("{rel}: {e}"),
                })?
            }
        };
        samples.push(Sample {
            sample_id: r.sample_id,
            product_id: r.product_id,
            category_id: r.category_id,
            domain: r.domain,
            frames,
            frames_ref,
            text_tokens: r.text_tokens,
            gen_seed: r.gen_seed,
        });
    }
    Ok(Corpus::from_samples(samples)?.with_generator(generator))
}

impl Corpus {
    /// Writes every sample's pixels to `<dir>/<subdir>/<sample_id>.cptf` and
    /// returns a copy whose samples reference those files.
    pub fn materialize_frames(&self, dir: &Path, subdir: &str) -> Result<Corpus> {
        fs::create_dir_all(dir.join(subdir))?;
        let mut samples = Vec::with_capacity(self.len());
        for s in self.samples() {
            let rel = format!("{subdir}/{}.cptf", s.sample_id);
            let raw = RawTensor {
                dims: [
                    s.frames.num_frames() as u32,
                    s.frames.height() as u32,
                    s.frames.width() as u32,
                    3,
                ],
                data: s.frames.data().to_vec(),
            };
            write_tensor_file(&dir.join(&rel), &raw)?;
            let mut s = s.clone();
            s.frames_ref = FramesRef::Path(rel);
            samples.push(s);
        }
        Corpus::from_samples(samples)
    }
}
