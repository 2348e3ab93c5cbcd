//! Timestep-gridded replay memory for curated errors.
//!
//! Two banks of `n_test` grids each hold latent (`vid`) and noise (`noi`)
//! errors. Grid `n` stores errors curated at training timesteps whose nearest
//! test-grid point is `n / n_test`. A full grid replaces its entry closest in
//! L2 to the incoming error, so repeated near-duplicates do not crowd out rare
//! ones.
//!
//! Snapshot layout (little-endian):
//!
//! ```text
//! "ERFTBANK1" | n_train, n_test, capacity, frames, dim (u32)
//!             | for vid then noi, for each grid: count (u32), count * frames * dim f64
//! ```
//!
//! `frames = dim = 0` marks a bank that has never stored anything.

use std::path::Path;

use crate::error::{Error, Result};
use crate::flow_matching::TimestepSchedule;
use crate::numerics::{squared_distance, RngState, Tensor};
use crate::velocity_net::ByteReader;

const SNAPSHOT_MAGIC: &[u8; 9] = b"ERFTBANK1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Channel {
    Vid,
    Noi,
}

impl Channel {
    pub fn name(self) -> &'static str {
        match self {
            Channel::Vid => "vid",
            Channel::Noi => "noi",
        }
    }
}

/// Index of the test-grid point nearest to `t`; ties go to the smaller index.
pub fn nearest_grid(t: f64, schedule: &TimestepSchedule) -> Result<usize> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("t = {t} outside [0, 1]")));
    }
    let n = schedule.n_test;
    let guess = ((t * n as f64).floor() as usize).min(n - 1);
    let mut best = guess.saturating_sub(1);
    let mut best_dist = (t - schedule.test_point(best)).abs();
    for k in best + 1..=(guess + 1).min(n - 1) {
        let d = (t - schedule.test_point(k)).abs();
        if d < best_dist {
            best = k;
            best_dist = d;
        }
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateOutcome {
    Appended,
    Replaced(usize),
}

/// One bounded buffer of error tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct BankGrid {
    entries: Vec<Tensor>,
    capacity: usize,
}

impl BankGrid {
    pub fn new(capacity: usize) -> Self {
        Self {
            entries: Vec::new(),
            capacity,
        }
    }

    pub fn entries(&self) -> &[Tensor] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Entry closest in L2 to `error` (first one on ties).
    pub fn most_similar(&self, error: &Tensor) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in self.entries.iter().enumerate() {
            let d = squared_distance(e.data(), error.data()).sqrt();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best.map(|(i, _)| i)
    }

    pub fn push(&mut self, error: Tensor) -> Result<UpdateOutcome> {
        if let Some(first) = self.entries.first() {
            if first.shape() != error.shape() {
                return Err(Error::invalid(format!(
                    "error shape {:?} does not match grid shape {:?}",
                    error.shape(),
                    first.shape()
                )));
            }
        }
        if self.entries.len() < self.capacity {
            self.entries.push(error);
            return Ok(UpdateOutcome::Appended);
        }
        let idx = self.most_similar(&error).expect("full grid is non-empty");
        self.entries[idx] = error;
        Ok(UpdateOutcome::Replaced(idx))
    }

    pub fn sample(&self, rng: &mut RngState) -> Option<&Tensor> {
        if self.entries.is_empty() {
            return None;
        }
        Some(&self.entries[rng.below(self.entries.len())])
    }
}

/// Which injection channels the bank can currently serve at one grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Availability {
    pub vid: bool,
    pub noi: bool,
    pub img: bool,
}

impl Availability {
    pub const ALL: Availability = Availability {
        vid: true,
        noi: true,
        img: true,
    };
    pub const NONE: Availability = Availability {
        vid: false,
        noi: false,
        img: false,
    };
}

/// Errors curated from one training sample, tagged with its timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct CuratedError {
    pub t: f64,
    pub e_vid: Tensor,
    pub e_noi: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OccupancyRow {
    pub channel: Channel,
    pub grid_index: usize,
    pub grid_t: f64,
    pub occupancy: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorBank {
    vid: Vec<BankGrid>,
    noi: Vec<BankGrid>,
    schedule: TimestepSchedule,
    capacity: usize,
}

impl ErrorBank {
    pub fn new(schedule: TimestepSchedule, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("grid capacity must be >= 1"));
        }
        let grids = vec![BankGrid::new(capacity); schedule.n_test];
        Ok(Self {
            vid: grids.clone(),
            noi: grids,
            schedule,
            capacity,
        })
    }

    pub fn schedule(&self) -> &TimestepSchedule {
        &self.schedule
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn grids(&self, channel: Channel) -> &[BankGrid] {
        match channel {
            Channel::Vid => &self.vid,
            Channel::Noi => &self.noi,
        }
    }

    fn grids_mut(&mut self, channel: Channel) -> &mut [BankGrid] {
        match channel {
            Channel::Vid => &mut self.vid,
            Channel::Noi => &mut self.noi,
        }
    }

    fn check_index(&self, n: usize) -> Result<()> {
        if n >= self.schedule.n_test {
            return Err(Error::invalid(format!(
                "grid index {n} out of range (n_test = {})",
                self.schedule.n_test
            )));
        }
        Ok(())
    }

    pub fn grid(&self, channel: Channel, n: usize) -> Result<&BankGrid> {
        self.check_index(n)?;
        Ok(&self.grids(channel)[n])
    }

    fn entry_shape(&self) -> Option<&[usize]> {
        self.vid
            .iter()
            .chain(&self.noi)
            .find_map(|g| g.entries.first())
            .map(Tensor::shape)
    }

    pub fn total_entries(&self) -> usize {
        self.vid.iter().chain(&self.noi).map(BankGrid::len).sum()
    }

    pub fn update(&mut self, channel: Channel, n: usize, error: Tensor) -> Result<UpdateOutcome> {
        self.check_index(n)?;
        if let Some(shape) = self.entry_shape() {
            if shape != error.shape() {
                return Err(Error::invalid(format!(
                    "error shape {:?} does not match bank shape {shape:?}",
                    error.shape()
                )));
            }
        }
        self.grids_mut(channel)[n].push(error)
    }

    /// Files both errors of `curated` under the grid nearest its timestep.
    pub fn bank(&mut self, curated: &CuratedError) -> Result<()> {
        let n = nearest_grid(curated.t, &self.schedule)?;
        self.update(Channel::Vid, n, curated.e_vid.clone())?;
        self.update(Channel::Noi, n, curated.e_noi.clone())?;
        Ok(())
    }

    fn sample_channel(&self, channel: Channel, n: usize, rng: &mut RngState) -> Result<Tensor> {
        self.check_index(n)?;
        self.grids(channel)[n]
            .sample(rng)
            .cloned()
            .ok_or_else(|| Error::EmptyBank(format!("{} grid {n}", channel.name())))
    }

    pub fn sample_vid(&self, n: usize, rng: &mut RngState) -> Result<Tensor> {
        self.sample_channel(Channel::Vid, n, rng)
    }

    pub fn sample_noi(&self, n: usize, rng: &mut RngState) -> Result<Tensor> {
        self.sample_channel(Channel::Noi, n, rng)
    }

    /// Reference-frame error: a random temporal slice of a random latent
    /// error from a random non-empty grid, regardless of the current timestep.
    /// Also returns the grid it came from.
    pub fn sample_img_with_grid(&self, rng: &mut RngState) -> Result<(usize, Tensor)> {
        let occupied: Vec<usize> = (0..self.vid.len())
            .filter(|&n| !self.vid[n].is_empty())
            .collect();
        if occupied.is_empty() {
            return Err(Error::EmptyBank("all vid grids".into()));
        }
        let n = occupied[rng.below(occupied.len())];
        let entry = self.vid[n].sample(rng).expect("grid is non-empty");
        let frame = entry.row(rng.below(entry.rows()))?;
        Ok((n, frame))
    }

    pub fn sample_img(&self, rng: &mut RngState) -> Result<Tensor> {
        self.sample_img_with_grid(rng).map(|(_, e)| e)
    }

    pub fn availability(&self, n: usize) -> Result<Availability> {
        self.check_index(n)?;
        Ok(Availability {
            vid: !self.vid[n].is_empty(),
            noi: !self.noi[n].is_empty(),
            img: self.vid.iter().any(|g| !g.is_empty()),
        })
    }

    pub fn occupancy(&self) -> Vec<OccupancyRow> {
        [Channel::Vid, Channel::Noi]
            .into_iter()
            .flat_map(|ch| {
                self.grids(ch)
                    .iter()
                    .enumerate()
                    .map(move |(n, g)| OccupancyRow {
                        channel: ch,
                        grid_index: n,
                        grid_t: self.schedule.test_point(n),
                        occupancy: g.len(),
                    })
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (frames, dim) = match self.entry_shape() {
            Some(&[f, d]) => (f, d),
            _ => (0, 0),
        };
        let mut out = Vec::new();
        out.extend_from_slice(SNAPSHOT_MAGIC);
        for v in [
            self.schedule.n_train,
            self.schedule.n_test,
            self.capacity,
            frames,
            dim,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for grid in self.vid.iter().chain(&self.noi) {
            out.extend_from_slice(&(grid.len() as u32).to_le_bytes());
            for e in &grid.entries {
                for v in e.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(SNAPSHOT_MAGIC.len())? != SNAPSHOT_MAGIC {
            return Err(Error::Format("bank snapshot magic mismatch".into()));
        }
        let n_train = r.u32()? as usize;
        let n_test = r.u32()? as usize;
        let capacity = r.u32()? as usize;
        let frames = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let schedule =
            TimestepSchedule::new(n_train, n_test).map_err(|e| Error::Format(e.to_string()))?;
        let mut bank = Self::new(schedule, capacity).map_err(|e| Error::Format(e.to_string()))?;
        for ch in [Channel::Vid, Channel::Noi] {
            for n in 0..n_test {
                let count = r.u32()? as usize;
                if count > capacity {
                    return Err(Error::Format(format!(
                        "{} grid {n} holds {count} entries, capacity {capacity}",
                        ch.name()
                    )));
                }
                if count > 0 && frames * dim == 0 {
                    return Err(Error::Format(
                        "entries present but entry shape is empty".into(),
                    ));
                }
                for _ in 0..count {
                    let data = (0..frames * dim)
                        .map(|_| r.f64())
                        .collect::<Result<Vec<_>>>()?;
                    let t = Tensor::new(vec![frames, dim], data)
                        .map_err(|e| Error::Format(e.to_string()))?;
                    bank.grids_mut(ch)[n].entries.push(t);
                }
            }
        }
        r.finish()?;
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Merges one iteration's curated errors from every simulated worker.
///
/// `iteration` counts from 1. Up to and including `warmup_iters`, every
/// worker's bank receives every worker's errors (worker order, then curation
/// order). Afterwards bank `w` receives only worker `w`'s errors.
pub fn warmup_gather(
    iteration: usize,
    warmup_iters: usize,
    worker_errors: &[Vec<CuratedError>],
    banks: &mut [ErrorBank],
) -> Result<()> {
    if worker_errors.len() != banks.len() {
        return Err(Error::invalid(format!(
            "{} curation streams for {} banks",
            worker_errors.len(),
            banks.len()
        )));
    }
    if iteration <= warmup_iters {
        for bank in banks.iter_mut() {
            for e in worker_errors.iter().flatten() {
                bank.bank(e)?;
            }
        }
    } else {
        for (bank, errors) in banks.iter_mut().zip(worker_errors) {
            for e in errors {
                bank.bank(e)?;
            }
        }
    }
    Ok(())
}
