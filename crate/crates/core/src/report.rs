//! Artifact writers.
//!
//! `latents.bin` layout: one UTF-8 header line
//! `blockpipe-latents v1 frame=[H,W,C] blocks=<K> config=<json>\n`, then per
//! block a record of `u64 block_id`, `u64 frame_count` and
//! `frame_count·H·W·C` values, all little-endian, values as `f64`.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::analytics::BubbleFraction;
use crate::error::{Error, Result};
use crate::pipeline::{schedule, BubbleStats, EmittedBlock, RoundPlan, ScheduleEvent, TransferLedger};

const MAGIC: &str = "blockpipe-latents v1";

pub fn write_latents(out: impl Write, blocks: &[EmittedBlock], frame: [usize; 3], config_json: &str) -> Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(w, "{MAGIC} frame=[{},{},{}] blocks={} config={config_json}", frame[0], frame[1], frame[2], blocks.len())?;
    for b in blocks {
        let shape = b.frames.shape();
        if shape[1..] != frame {
            return Err(Error::dim(format!("block {} has frame shape {:?}", b.block_id, &shape[1..])));
        }
        w.write_all(&b.block_id.to_le_bytes())?;
        w.write_all(&(shape[0] as u64).to_le_bytes())?;
        for v in b.frames.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One decoded `latents.bin` record.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentRecord {
    pub block_id: u64,
    pub frames: usize,
    pub data: Vec<f64>,
}

/// Parses a `latents.bin` stream; returns the header line and the records.
pub fn read_latents(mut input: impl Read) -> Result<(String, Vec<LatentRecord>)> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Invariant("latents file has no header line".into()))?;
    let header =
        String::from_utf8(bytes[..nl].to_vec()).map_err(|_| Error::Invariant("latents header is not UTF-8".into()))?;
    let rest =
        header.strip_prefix(MAGIC).ok_or_else(|| Error::Invariant("latents header lacks the magic prefix".into()))?;
    let frame: Vec<usize> = rest
        .split_once("frame=[")
        .and_then(|(_, r)| r.split_once(']'))
        .map(|(dims, _)| dims.split(',').filter_map(|d| d.trim().parse().ok()).collect())
        .unwrap_or_default();
    if frame.len() != 3 {
        return Err(Error::Invariant("latents header lacks frame=[H,W,C]".into()));
    }
    let per_frame: usize = frame.iter().product();
    let mut body = &bytes[nl + 1..];
    let take_u64 = |body: &mut &[u8]| -> Result<u64> {
        let (head, tail) =
            body.split_at_checked(8).ok_or_else(|| Error::Invariant("latents record truncated".into()))?;
        *body = tail;
        Ok(u64::from_le_bytes(head.try_into().expect("eight bytes")))
    };
    let mut records = Vec::new();
    while !body.is_empty() {
        let block_id = take_u64(&mut body)?;
        let frames = take_u64(&mut body)? as usize;
        let data =
            (0..frames * per_frame).map(|_| take_u64(&mut body).map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
        records.push(LatentRecord { block_id, frames, data });
    }
    Ok((header, records))
}

pub fn write_schedule(out: impl Write, events: &[ScheduleEvent], config_json: &str) -> Result<()> {
    let mut w = BufWriter::new(out);
    schedule::write_csv(events, config_json, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Pretty JSON plus trailing newline.
pub fn write_json(mut out: impl Write, value: &impl Serialize) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

pub fn create(path: &Path) -> Result<fs::File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(fs::File::create(path)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct LedgerReport<'a, C: Serialize> {
    pub config: &'a C,
    pub ledger: &'a TransferLedger,
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockSummary {
    pub block_id: u64,
    pub frames: usize,
    pub noise_ids: Vec<usize>,
    pub mean_abs: f64,
}

impl BlockSummary {
    pub fn of(b: &EmittedBlock) -> Self {
        let n = b.frames.len().max(1) as f64;
        Self {
            block_id: b.block_id,
            frames: b.frames.shape()[0],
            noise_ids: b.noise_ids.clone(),
            mean_abs: b.frames.data().iter().map(|v| v.abs()).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FormulaComparison {
    pub formula: BubbleFraction,
    pub formula_ratio: f64,
    pub measured_bubble: f64,
    pub measured_ratio: f64,
    pub busy_per_device_expected: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary<'a, C: Serialize> {
    pub config: &'a C,
    pub bubbles: &'a BubbleStats,
    pub comparison: FormulaComparison,
    pub blocks: Vec<BlockSummary>,
    pub rounds: &'a [RoundPlan],
}

impl<C: Serialize> RunSummary<'_, C> {
    pub fn text(&self) -> String {
        let b = self.bubbles;
        let c = &self.comparison;
        let mut s = String::new();
        let mut line = |k: &str, v: String| s.push_str(&format!("{k:<26}{v}\n"));
        line("devices", b.devices.to_string());
        line("blocks emitted", self.blocks.len().to_string());
        line("busy slots per device", format!("{:?}", b.busy_per_device));
        line("idle (warmup/steady/cool)", format!("{}/{}/{}", b.warmup_idle, b.steady_idle, b.cooldown_idle));
        line("bubble size (measured)", format!("{}", c.measured_bubble));
        line("bubble size (formula)", c.formula.bubble.to_string());
        line("bubble ratio (measured)", format!("{:.6}", c.measured_ratio));
        line(
            "bubble ratio (formula)",
            format!("{:.6} = {}/{}", c.formula_ratio, c.formula.bubble, c.formula.denominator()),
        );
        s
    }

    pub fn csv(&self) -> String {
        let c = &self.comparison;
        let mut s = String::from("key,value\n");
        s.push_str(&format!("devices,{}\n", self.bubbles.devices));
        s.push_str(&format!("blocks,{}\n", self.blocks.len()));
        s.push_str(&format!("measured_bubble,{}\n", c.measured_bubble));
        s.push_str(&format!("formula_bubble,{}\n", c.formula.bubble));
        s.push_str(&format!("measured_ratio,{}\n", c.measured_ratio));
        s.push_str(&format!("formula_ratio,{}\n", c.formula_ratio));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn latents_round_trip() {
        let blocks = vec![
            EmittedBlock {
                block_id: 1,
                frames: Tensor::new(vec![2, 1, 1, 2], vec![0.5, -1.0, 3.25, f64::MIN_POSITIVE]).unwrap(),
                noise_ids: vec![0, 1],
            },
            EmittedBlock {
                block_id: 2,
                frames: Tensor::new(vec![1, 1, 1, 2], vec![7.0, 8.0]).unwrap(),
                noise_ids: vec![1],
            },
        ];
        let mut buf = Vec::new();
        write_latents(&mut buf, &blocks, [1, 1, 2], "{}").unwrap();
        let (header, recs) = read_latents(buf.as_slice()).unwrap();
        assert_eq!(header, "blockpipe-latents v1 frame=[1,1,2] blocks=2 config={}");
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].data, blocks[0].frames.data());
        assert_eq!((recs[1].block_id, recs[1].frames), (2, 1));
        assert_eq!(buf.len(), header.len() + 1 + (16 + 32) + (16 + 16));
    }

    #[test]
    fn truncated_latents_rejected() {
        let blocks = vec![EmittedBlock {
            block_id: 1,
            frames: Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(),
            noise_ids: vec![],
        }];
        let mut buf = Vec::new();
        write_latents(&mut buf, &blocks, [1, 1, 1], "{}").unwrap();
        buf.pop();
        assert!(read_latents(buf.as_slice()).is_err());
        assert!(read_latents(&b"nonsense\n"[..]).is_err());
    }
}
