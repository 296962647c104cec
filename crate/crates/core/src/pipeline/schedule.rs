//! Unit-slot Gantt log and bubble accounting.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Steady,
    Cooldown,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Warmup => "warmup",
            Phase::Steady => "steady",
            Phase::Cooldown => "cooldown",
        })
    }
}

/// One device at one slot. `block_id == None` marks an idle slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScheduleEvent {
    pub slot: u64,
    pub device: usize,
    pub block_id: Option<u64>,
    pub level: Option<usize>,
    pub phase: Phase,
}

impl ScheduleEvent {
    pub fn busy(slot: u64, device: usize, block_id: u64, level: usize, phase: Phase) -> Self {
        Self { slot, device, block_id: Some(block_id), level: Some(level), phase }
    }

    pub fn is_idle(&self) -> bool {
        self.block_id.is_none()
    }
}

fn idle_phase(before: Option<Phase>, after: Option<Phase>) -> Phase {
    match (before, after) {
        (Some(a), Some(b)) if a == b => a,
        (Some(Phase::Steady), Some(b)) => b,
        (Some(a), _) => a,
        (None, Some(b)) => b,
        (None, None) => Phase::Warmup,
    }
}

/// Adds idle events so every device has one event per slot over the run's
/// span, then sorts by `(slot, device)`.
pub fn complete_log(busy: Vec<ScheduleEvent>, devices: usize) -> Result<Vec<ScheduleEvent>> {
    let (first, last) = match (busy.iter().map(|e| e.slot).min(), busy.iter().map(|e| e.slot).max()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Ok(Vec::new()),
    };
    let mut per_device: Vec<BTreeMap<u64, ScheduleEvent>> = vec![BTreeMap::new(); devices];
    for e in busy {
        if e.device >= devices {
            return Err(Error::Log(format!("device {} outside 0..{devices}", e.device)));
        }
        let slot = e.slot;
        if per_device[e.device].insert(slot, e).is_some() {
            return Err(Error::Log(format!("two events share a slot at {slot}")));
        }
    }
    let mut out = Vec::new();
    for (device, events) in per_device.iter().enumerate() {
        for slot in first..=last {
            match events.get(&slot) {
                Some(e) => out.push(e.clone()),
                None => {
                    let before = events.range(..slot).next_back().map(|(_, e)| e.phase);
                    let after = events.range(slot..).next().map(|(_, e)| e.phase);
                    out.push(ScheduleEvent {
                        slot,
                        device,
                        block_id: None,
                        level: None,
                        phase: idle_phase(before, after),
                    });
                }
            }
        }
    }
    out.sort_by_key(|e| (e.slot, e.device));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BubbleStats {
    pub devices: usize,
    pub first_slot: u64,
    pub last_slot: u64,
    pub busy_per_device: Vec<u64>,
    pub idle_per_device: Vec<u64>,
    pub warmup_idle: u64,
    pub steady_idle: u64,
    pub cooldown_idle: u64,
    pub total_idle: u64,
    pub total_busy: u64,
    /// Idle slots per device (`total_idle / N`), comparable with the
    /// closed-form bubble size.
    pub bubble_size: f64,
    pub ratio: f64,
}

/// Counts idle slots within the run's span. Rejects logs that miss a
/// `(slot, device)` cell or repeat one.
pub fn measure_bubbles(log: &[ScheduleEvent], devices: usize) -> Result<BubbleStats> {
    if devices == 0 {
        return Err(Error::Log("no devices".into()));
    }
    let busy_slots = log.iter().filter(|e| !e.is_idle()).map(|e| e.slot);
    let (first, last) = match (busy_slots.clone().min(), busy_slots.max()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Log("log has no busy events".into())),
    };
    let span = (last - first + 1) as usize;
    let mut seen = vec![false; span * devices];
    let mut stats = BubbleStats {
        devices,
        first_slot: first,
        last_slot: last,
        busy_per_device: vec![0; devices],
        idle_per_device: vec![0; devices],
        warmup_idle: 0,
        steady_idle: 0,
        cooldown_idle: 0,
        total_idle: 0,
        total_busy: 0,
        bubble_size: 0.0,
        ratio: 0.0,
    };
    for e in log {
        if e.device >= devices {
            return Err(Error::Log(format!("device {} outside 0..{devices}", e.device)));
        }
        if e.block_id.is_some() != e.level.is_some() {
            return Err(Error::Log(format!("event at slot {} has a block without a level", e.slot)));
        }
        if e.slot < first || e.slot > last {
            continue;
        }
        let cell = (e.slot - first) as usize * devices + e.device;
        if std::mem::replace(&mut seen[cell], true) {
            return Err(Error::Log(format!("duplicate event at slot {} device {}", e.slot, e.device)));
        }
        if e.is_idle() {
            stats.idle_per_device[e.device] += 1;
            match e.phase {
                Phase::Warmup => stats.warmup_idle += 1,
                Phase::Steady => stats.steady_idle += 1,
                Phase::Cooldown => stats.cooldown_idle += 1,
            }
        } else {
            stats.busy_per_device[e.device] += 1;
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Log(format!(
            "no event at slot {} device {}",
            first + (missing / devices) as u64,
            missing % devices
        )));
    }
    stats.total_idle = stats.idle_per_device.iter().sum();
    stats.total_busy = stats.busy_per_device.iter().sum();
    stats.bubble_size = stats.total_idle as f64 / devices as f64;
    stats.ratio = stats.total_idle as f64 / (stats.total_idle + stats.total_busy) as f64;
    Ok(stats)
}

/// Checks that every pass moves through devices `0..N` at strictly
/// increasing slots. Passes are identified by `(block_id, level)`.
pub fn check_precedence(log: &[ScheduleEvent], devices: usize) -> Result<()> {
    let mut slots: BTreeMap<(u64, usize), Vec<Option<u64>>> = BTreeMap::new();
    for e in log.iter().filter(|e| !e.is_idle()) {
        if e.device >= devices {
            return Err(Error::Log(format!("device {} outside 0..{devices}", e.device)));
        }
        let key = (e.block_id.unwrap_or_default(), e.level.unwrap_or_default());
        let row = slots.entry(key).or_insert_with(|| vec![None; devices]);
        if row[e.device].replace(e.slot).is_some() {
            return Err(Error::Log(format!("pass {key:?} visits device {} twice", e.device)));
        }
    }
    for (key, row) in slots {
        let mut prev = None;
        for (j, s) in row.into_iter().enumerate() {
            let s = s.ok_or_else(|| Error::Log(format!("pass {key:?} skips device {j}")))?;
            if prev.is_some_and(|p| s <= p) {
                return Err(Error::Log(format!("pass {key:?} reaches device {j} too early")));
            }
            prev = Some(s);
        }
    }
    Ok(())
}

pub fn write_csv(log: &[ScheduleEvent], config_json: &str, mut out: impl Write) -> Result<()> {
    writeln!(out, "# config={config_json}")?;
    writeln!(out, "slot,device,block_id,level,phase")?;
    for e in log {
        match (e.block_id, e.level) {
            (Some(b), Some(l)) => writeln!(out, "{},{},{},{},{}", e.slot, e.device, b, l, e.phase)?,
            _ => writeln!(out, "{},{},IDLE,,{}", e.slot, e.device, e.phase)?,
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(slot: u64, device: usize, phase: Phase) -> ScheduleEvent {
        ScheduleEvent::busy(slot, device, 1 + slot, 3, phase)
    }

    #[test]
    fn fill_and_measure() {
        let events =
            vec![b(0, 0, Phase::Warmup), b(1, 1, Phase::Warmup), b(2, 0, Phase::Steady), b(3, 1, Phase::Steady)];
        let log = complete_log(events, 2).unwrap();
        assert_eq!(log.len(), 8);
        let s = measure_bubbles(&log, 2).unwrap();
        assert_eq!(s.busy_per_device, vec![2, 2]);
        assert_eq!(s.idle_per_device, vec![2, 2]);
        // boundary idles go to warmup; device 0's trailing idle stays steady
        assert_eq!(s.warmup_idle, 3);
        assert_eq!(s.steady_idle, 1);
        assert_eq!(s.bubble_size, 2.0);
        assert_eq!(s.ratio, 0.5);
    }

    #[test]
    fn malformed_logs() {
        let log = complete_log(vec![b(0, 0, Phase::Steady), b(2, 0, Phase::Steady)], 1).unwrap();
        let mut missing = log.clone();
        missing.remove(1);
        assert!(matches!(measure_bubbles(&missing, 1), Err(Error::Log(_))));
        let mut dup = log.clone();
        dup.push(log[0].clone());
        assert!(matches!(measure_bubbles(&dup, 1), Err(Error::Log(_))));
        assert!(matches!(measure_bubbles(&[], 1), Err(Error::Log(_))));
        assert!(matches!(complete_log(vec![b(0, 3, Phase::Steady)], 2), Err(Error::Log(_))));
    }

    #[test]
    fn single_device_no_idle() {
        let log = complete_log((0..5).map(|s| b(s, 0, Phase::Steady)).collect(), 1).unwrap();
        let s = measure_bubbles(&log, 1).unwrap();
        assert_eq!((s.total_idle, s.ratio), (0, 0.0));
    }

    #[test]
    fn precedence() {
        let ok = vec![ScheduleEvent::busy(0, 0, 1, 4, Phase::Warmup), ScheduleEvent::busy(1, 1, 1, 4, Phase::Warmup)];
        check_precedence(&ok, 2).unwrap();
        let bad = vec![ScheduleEvent::busy(1, 0, 1, 4, Phase::Warmup), ScheduleEvent::busy(1, 1, 1, 4, Phase::Warmup)];
        assert!(check_precedence(&bad, 2).is_err());
    }

    #[test]
    fn csv_layout() {
        let log = complete_log(vec![b(0, 0, Phase::Warmup), b(1, 1, Phase::Warmup)], 2).unwrap();
        let mut buf = Vec::new();
        write_csv(&log, "{}", &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# config={}");
        assert_eq!(lines[1], "slot,device,block_id,level,phase");
        assert_eq!(lines[2], "0,0,1,3,warmup");
        assert_eq!(lines[3], "0,1,IDLE,,warmup");
    }
}
