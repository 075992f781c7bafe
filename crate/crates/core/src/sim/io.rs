use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{MeetingRecord, MeetingSpec, TrackPoint, LABEL_BIN_MS};
use crate::audio::MultiChannelAudio;
use crate::error::{AsdError, Result};

/// Write `audio.pcm`, `tracks.jsonl`, `labels.csv` and `meta.json` into `dir`.
pub fn save_meeting(record: &MeetingRecord, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&record.spec)? + "\n")?;

    let mut pcm = BufWriter::new(fs::File::create(dir.join("audio.pcm"))?);
    for i in 0..record.audio.len() {
        for ch in &record.audio.channels {
            pcm.write_all(&(ch[i] as f32).to_le_bytes())?;
        }
    }
    pcm.flush()?;

    let mut tracks = BufWriter::new(fs::File::create(dir.join("tracks.jsonl"))?);
    for tp in record.tracks.iter().flatten() {
        serde_json::to_writer(&mut tracks, tp)?;
        tracks.write_all(b"\n")?;
    }
    tracks.flush()?;

    let mut labels = BufWriter::new(fs::File::create(dir.join("labels.csv"))?);
    writeln!(labels, "time_ms,participant_id,speaking")?;
    let bins = record.labels.first().map_or(0, Vec::len);
    for bin in 0..bins {
        for (p, row) in record.spec.participants.iter().zip(&record.labels) {
            writeln!(labels, "{},{},{}", bin as u64 * LABEL_BIN_MS, p.id, u8::from(row[bin]))?;
        }
    }
    labels.flush()?;
    Ok(())
}

pub fn load_meeting(dir: &Path) -> Result<MeetingRecord> {
    let spec: MeetingSpec = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    spec.validate()?;
    let m = spec.geometry.num_mics();

    let bytes = fs::read(dir.join("audio.pcm"))?;
    if bytes.len() % (4 * m) != 0 {
        return Err(AsdError::format(format!("audio.pcm size {} is not a multiple of {m} channels", bytes.len())));
    }
    let mut channels = vec![Vec::with_capacity(bytes.len() / 4 / m); m];
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        channels[i % m].push(v as f64);
    }
    if channels[0].len() != spec.num_samples() {
        return Err(AsdError::format(format!("audio has {} samples, meta expects {}", channels[0].len(), spec.num_samples())));
    }

    let mut tracks: Vec<Vec<TrackPoint>> = vec![Vec::new(); spec.num_ticks()];
    for line in BufReader::new(fs::File::open(dir.join("tracks.jsonl"))?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let tp: TrackPoint = serde_json::from_str(&line)?;
        tracks
            .get_mut(tp.frame)
            .ok_or_else(|| AsdError::format(format!("track frame {} beyond meeting", tp.frame)))?
            .push(tp);
    }

    let bins = spec.num_label_bins();
    let mut labels = vec![vec![None; bins]; spec.participants.len()];
    let text = fs::read_to_string(dir.join("labels.csv"))?;
    for (n, line) in text.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| s.trim().parse::<u64>().map_err(|_| AsdError::format(format!("labels.csv line {}: bad number {s:?}", n + 1)));
        if fields.len() != 3 {
            return Err(AsdError::format(format!("labels.csv line {}: expected 3 fields", n + 1)));
        }
        let (time, pid, speaking) = (parse(fields[0])?, parse(fields[1])?, parse(fields[2])?);
        let p = spec
            .participants
            .iter()
            .position(|p| p.id == pid)
            .ok_or_else(|| AsdError::format(format!("labels.csv: unknown participant {pid}")))?;
        let bin = (time / LABEL_BIN_MS) as usize;
        if bin >= bins || speaking > 1 {
            return Err(AsdError::format(format!("labels.csv line {}: out of range", n + 1)));
        }
        labels[p][bin] = Some(speaking == 1);
    }
    let labels = labels
        .into_iter()
        .map(|row| row.into_iter().collect::<Option<Vec<bool>>>())
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| AsdError::format("labels.csv does not cover every bin"))?;

    Ok(MeetingRecord {
        audio: MultiChannelAudio::new(channels, spec.sample_rate)?,
        spec,
        tracks,
        labels,
    })
}
