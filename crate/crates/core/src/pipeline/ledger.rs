//! Scalars moved across each channel of the chain
//! `coordinator → device 0 → … → device N-1 → coordinator`.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Payload {
    /// Noisy latents, `C` wide.
    Latent,
    /// Hidden rows, `h` wide.
    Hidden,
    /// Noise prediction for the centre frames, `C` wide.
    Prediction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Boundary {
    pub index: usize,
    pub from: String,
    pub to: String,
    pub payload: Payload,
    pub per_round: Vec<u64>,
    pub per_pass: Vec<u64>,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TransferLedger {
    pub devices: usize,
    pub boundaries: Vec<Boundary>,
}

fn endpoint(i: usize, devices: usize) -> String {
    if i == 0 || i > devices {
        "coordinator".into()
    } else {
        format!("device{}", i - 1)
    }
}

impl TransferLedger {
    pub fn new(devices: usize, rounds: usize, passes: usize) -> Self {
        let boundaries = (0..=devices)
            .map(|i| Boundary {
                index: i,
                from: endpoint(i, devices),
                to: if i == devices { "coordinator".into() } else { format!("device{i}") },
                payload: match i {
                    0 => Payload::Latent,
                    i if i == devices => Payload::Prediction,
                    _ => Payload::Hidden,
                },
                per_round: vec![0; rounds],
                per_pass: vec![0; passes],
                total: 0,
            })
            .collect();
        Self { devices, boundaries }
    }

    pub fn record(&mut self, boundary: usize, round: usize, seq: usize, scalars: u64) -> Result<()> {
        let b = self.boundaries.get_mut(boundary).ok_or_else(|| Error::Invariant(format!("no boundary {boundary}")))?;
        match (b.per_round.get_mut(round), b.per_pass.get_mut(seq)) {
            (Some(r), Some(p)) => {
                *r += scalars;
                *p += scalars;
                b.total += scalars;
                Ok(())
            }
            _ => Err(Error::Invariant(format!("round {round} / pass {seq} outside the ledger"))),
        }
    }

    /// Elementwise sum with a ledger of the same geometry.
    pub fn merge(&mut self, other: &TransferLedger) -> Result<()> {
        if other.devices != self.devices {
            return Err(Error::Invariant("merging ledgers of different device counts".into()));
        }
        for (a, b) in self.boundaries.iter_mut().zip(&other.boundaries) {
            if a.per_round.len() != b.per_round.len() || a.per_pass.len() != b.per_pass.len() {
                return Err(Error::Invariant("merging ledgers of different lengths".into()));
            }
            a.per_round.iter_mut().zip(&b.per_round).for_each(|(x, y)| *x += y);
            a.per_pass.iter_mut().zip(&b.per_pass).for_each(|(x, y)| *x += y);
            a.total += b.total;
        }
        Ok(())
    }

    pub fn boundary(&self, i: usize) -> Option<&Boundary> {
        self.boundaries.get(i)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_and_merge() {
        let mut a = TransferLedger::new(2, 3, 4);
        assert_eq!(a.boundaries.len(), 3);
        assert_eq!(a.boundaries[0].from, "coordinator");
        assert_eq!(a.boundaries[1].from, "device0");
        assert_eq!(a.boundaries[1].to, "device1");
        assert_eq!(a.boundaries[2].to, "coordinator");
        assert_eq!(a.boundaries[2].payload, Payload::Prediction);
        a.record(1, 2, 3, 10).unwrap();
        let mut b = TransferLedger::new(2, 3, 4);
        b.record(1, 2, 1, 5).unwrap();
        a.merge(&b).unwrap();
        assert_eq!(a.boundaries[1].per_round, vec![0, 0, 15]);
        assert_eq!(a.boundaries[1].per_pass, vec![0, 5, 0, 10]);
        assert_eq!(a.boundaries[1].total, 15);
        assert!(a.record(7, 0, 0, 1).is_err());
        assert!(a.merge(&TransferLedger::new(1, 3, 4)).is_err());
    }
}
