//! Dataset container file: magic "DVSY", u32 version, length-prefixed JSON
//! metadata (generator config plus per-video track/slot manifest), then raw
//! f32 payloads in manifest order and bit-packed mask rows.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::format::{pack_bits, unpack_bits, Reader};
use crate::synth::{Dataset, GroundTruthTrack, SynthConfig, SynthVideo};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: [u8; 4] = *b"DVSY";
pub const DATASET_VERSION: u32 = 1;

/// Metadata length cap; a prefix beyond this says the file is garbage, not
/// that the caller needs more memory.
const MAX_META_BYTES: u64 = 1 << 30;

#[derive(Serialize, Deserialize)]
struct TrackMeta {
    instance_id: usize,
    class_label: usize,
    first_appearance: usize,
}

#[derive(Serialize, Deserialize)]
struct VideoMeta {
    tracks: Vec<TrackMeta>,
    planted: Vec<Vec<Option<usize>>>,
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    config: SynthConfig,
    videos: Vec<VideoMeta>,
}

fn write_tensor_f32(w: &mut impl Write, t: &Tensor) -> Result<()> {
    for &v in t.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Serializes a dataset. Float payloads are stored as f32, which is exact
/// because the generator rounds every value through f32 at creation.
pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let meta = DatasetMeta {
        config: ds.config.clone(),
        videos: ds
            .videos
            .iter()
            .map(|v| VideoMeta {
                tracks: v
                    .gt
                    .iter()
                    .map(|g| TrackMeta {
                        instance_id: g.instance_id,
                        class_label: g.class_label,
                        first_appearance: g.first_appearance,
                    })
                    .collect(),
                planted: v.planted.clone(),
            })
            .collect(),
    };
    let meta_bytes = serde_json::to_vec(&meta)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(meta_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&meta_bytes)?;
    for video in &ds.videos {
        for q in &video.queries {
            write_tensor_f32(&mut w, q)?;
        }
        for p in &video.pixel_features {
            write_tensor_f32(&mut w, p)?;
        }
        for track in &video.gt {
            for mask in &track.masks {
                w.write_all(&pack_bits(mask))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Deserializes a dataset written by `write_dataset`. Round-trips are
/// bit-exact; structural damage is reported with the byte offset.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path)?;
    let mut r = Reader::new(BufReader::new(file), path);
    r.magic(&DATASET_MAGIC, "\"DVSY\"")?;
    let version = r.u32_le()?;
    if version != DATASET_VERSION {
        return Err(r.error(format!(
            "unsupported version {version} at byte 4 (expected {DATASET_VERSION})"
        )));
    }
    let meta_len = r.u64_le()?;
    if meta_len > MAX_META_BYTES {
        return Err(r.error(format!("implausible metadata length {meta_len} at byte 8")));
    }
    let meta_start = r.offset();
    let meta_bytes = r.bytes(meta_len as usize)?;
    let meta: DatasetMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| r.error(format!("metadata at byte {meta_start} is not valid JSON: {e}")))?;
    let cfg = meta.config.clone();
    cfg.validate()?;

    if meta.videos.len() != cfg.num_videos {
        return Err(r.error(format!(
            "metadata lists {} videos but config says {}",
            meta.videos.len(),
            cfg.num_videos
        )));
    }

    let pixels = cfg.pixels();
    let mut videos = Vec::with_capacity(meta.videos.len());
    for (vi, vm) in meta.videos.iter().enumerate() {
        if vm.planted.len() != cfg.frames || vm.planted.iter().any(|row| row.len() != cfg.slots) {
            return Err(r.error(format!(
                "video {vi}: planted map shape disagrees with config ({} frames x {} slots)",
                cfg.frames, cfg.slots
            )));
        }
        if vm.tracks.len() > cfg.instances {
            return Err(r.error(format!(
                "video {vi}: {} tracks exceed configured instances {}",
                vm.tracks.len(),
                cfg.instances
            )));
        }
        for row in &vm.planted {
            if let Some(bad) = row.iter().flatten().find(|&&n| n >= vm.tracks.len()) {
                return Err(r.error(format!(
                    "video {vi}: planted slot points at missing track {bad}"
                )));
            }
        }

        let mut queries = Vec::with_capacity(cfg.frames);
        for _ in 0..cfg.frames {
            let data = r.f32_values(cfg.slots * cfg.dim)?;
            queries.push(Tensor::new(vec![cfg.slots, cfg.dim], data)?);
        }
        let mut pixel_features = Vec::with_capacity(cfg.frames);
        for _ in 0..cfg.frames {
            let data = r.f32_values(pixels * cfg.dim)?;
            pixel_features.push(Tensor::new(vec![pixels, cfg.dim], data)?);
        }
        let row_bytes = pixels.div_ceil(8);
        let mut gt = Vec::with_capacity(vm.tracks.len());
        for tm in &vm.tracks {
            let mut masks = Vec::with_capacity(cfg.frames);
            for _ in 0..cfg.frames {
                let raw = r.bytes(row_bytes)?;
                masks.push(unpack_bits(&raw, pixels));
            }
            let track = GroundTruthTrack {
                instance_id: tm.instance_id,
                class_label: tm.class_label,
                masks,
                first_appearance: tm.first_appearance,
            };
            let derived = (0..cfg.frames).find(|&t| track.visible_at(t));
            if derived != Some(tm.first_appearance) && derived.is_some() {
                return Err(r.error(format!(
                    "video {vi}: track {} claims first appearance {} but masks say {:?}",
                    tm.instance_id, tm.first_appearance, derived
                )));
            }
            gt.push(track);
        }
        videos.push(SynthVideo {
            queries,
            pixel_features,
            gt,
            planted: vm.planted.clone(),
        });
    }
    r.expect_eof()?;
    Ok(Dataset {
        config: cfg,
        videos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::DvtError;
    use crate::synth::generate_dataset;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            num_videos: 3,
            frames: 5,
            slots: 4,
            instances: 2,
            dim: 16,
            classes: 3,
            grid_h: 8,
            grid_w: 8,
            occlusion_len: (2, 3),
            seed: 11,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ds = generate_dataset(&small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.dvsy");
        write_dataset(&path, &ds).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn writes_are_byte_identical_for_same_config() {
        let ds = generate_dataset(&small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.dvsy");
        let b = dir.path().join("b.dvsy");
        write_dataset(&a, &ds).unwrap();
        write_dataset(&b, &generate_dataset(&small_cfg()).unwrap()).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn corrupt_magic_is_rejected_at_byte_zero() {
        let ds = generate_dataset(&small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.dvsy");
        write_dataset(&path, &ds).unwrap();
        let mut raw = std::fs::read(&path).unwrap();
        raw[0] = b'X';
        std::fs::write(&path, raw).unwrap();
        let err = read_dataset(&path).unwrap_err();
        match err {
            DvtError::Format { details, .. } => {
                assert!(details.contains("byte 0"), "details: {details}")
            }
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let ds = generate_dataset(&small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.dvsy");
        write_dataset(&path, &ds).unwrap();
        let mut raw = std::fs::read(&path).unwrap();
        raw[4] = 9;
        std::fs::write(&path, raw).unwrap();
        let err = read_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("version 9"), "got: {err}");
    }

    #[test]
    fn truncation_reports_byte_offset() {
        let ds = generate_dataset(&small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.dvsy");
        write_dataset(&path, &ds).unwrap();
        let raw = std::fs::read(&path).unwrap();
        let cut = raw.len() * 3 / 5;
        std::fs::write(&path, &raw[..cut]).unwrap();
        let err = read_dataset(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("truncated at byte"), "got: {msg}");
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let ds = generate_dataset(&small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.dvsy");
        write_dataset(&path, &ds).unwrap();
        let mut raw = std::fs::read(&path).unwrap();
        raw.push(0);
        std::fs::write(&path, raw).unwrap();
        let err = read_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("trailing data"), "got: {err}");
    }

    #[test]
    #[ignore = "timing probe; run manually and record the result in the README"]
    fn hundred_video_round_trip_timing() {
        let cfg = SynthConfig {
            num_videos: 100,
            ..SynthConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.dvsy");
        let t0 = std::time::Instant::now();
        write_dataset(&path, &ds).unwrap();
        let wrote = t0.elapsed();
        let t1 = std::time::Instant::now();
        let back = read_dataset(&path).unwrap();
        let read = t1.elapsed();
        assert_eq!(ds.videos.len(), back.videos.len());
        let bytes = std::fs::metadata(&path).unwrap().len();
        println!("100 videos, {bytes} bytes: write {wrote:?}, read {read:?}");
        assert!(wrote + read < std::time::Duration::from_secs(5));
    }
}
