//! Azimuth-synchronised sample histories and the period-difference operator.
//!
//! Sample indices are absolute: the first pushed sample is `k = 0`. A buffer
//! only retains the most recent `capacity` samples, so queries older than that
//! are reported as not ready, just like queries that need samples not pushed yet.

use std::f64::consts::TAU;

use nalgebra::DVector;

use crate::error::{config, Error, Result};

/// Fixed-speed rotor clock. Sample `k` sits at azimuth `2π (k mod P) / P`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeriodClock {
    samples_per_period: usize,
    dt: f64,
}

impl PeriodClock {
    pub fn new(samples_per_period: usize, dt: f64) -> Result<Self> {
        if samples_per_period < 3 {
            return Err(config(format!("samples per period must be at least 3, got {samples_per_period}")));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(config(format!("sample time must be positive, got {dt}")));
        }
        Ok(Self { samples_per_period, dt })
    }

    pub fn samples_per_period(&self) -> usize {
        self.samples_per_period
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Rotor period in seconds.
    pub fn period(&self) -> f64 {
        self.samples_per_period as f64 * self.dt
    }

    /// Rotor 1P frequency in Hz.
    pub fn one_p_hz(&self) -> f64 {
        1.0 / self.period()
    }

    pub fn azimuth_of(&self, k: usize) -> f64 {
        TAU * (k % self.samples_per_period) as f64 / self.samples_per_period as f64
    }

    /// Rotation count `j` containing sample `k`.
    pub fn rotation_of(&self, k: usize) -> usize {
        k / self.samples_per_period
    }

    pub fn sample_in_period(&self, k: usize) -> usize {
        k % self.samples_per_period
    }

    pub fn is_period_end(&self, k: usize) -> bool {
        (k + 1).is_multiple_of(self.samples_per_period)
    }
}

/// Ring buffer of fixed-width vectors with period differencing.
#[derive(Debug, Clone)]
pub struct DeltaBuffer {
    period: usize,
    width: usize,
    capacity: usize,
    data: Vec<f64>,
    pushed: usize,
}

impl DeltaBuffer {
    /// `capacity` must cover at least one period plus the current sample.
    pub fn new(period: usize, width: usize, capacity: usize) -> Result<Self> {
        if width == 0 {
            return Err(config("buffer width must be positive"));
        }
        if capacity < period + 1 {
            return Err(config(format!(
                "capacity {capacity} cannot hold a period of {period} plus the current sample"
            )));
        }
        Ok(Self { period, width, capacity, data: vec![0.0; capacity * width], pushed: 0 })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn period(&self) -> usize {
        self.period
    }

    /// Number of samples pushed so far; the next sample gets this index.
    pub fn len(&self) -> usize {
        self.pushed
    }

    pub fn is_empty(&self) -> bool {
        self.pushed == 0
    }

    pub fn push(&mut self, sample: &[f64]) -> Result<()> {
        if sample.len() != self.width {
            return Err(config(format!("sample width {} does not match buffer width {}", sample.len(), self.width)));
        }
        let slot = (self.pushed % self.capacity) * self.width;
        self.data[slot..slot + self.width].copy_from_slice(sample);
        self.pushed += 1;
        Ok(())
    }

    fn slot(&self, k: usize) -> Result<&[f64]> {
        if k >= self.pushed {
            return Err(Error::NotReady(format!("sample {k} not pushed yet ({} stored)", self.pushed)));
        }
        if self.pushed - k > self.capacity {
            return Err(Error::NotReady(format!("sample {k} already evicted")));
        }
        let slot = (k % self.capacity) * self.width;
        Ok(&self.data[slot..slot + self.width])
    }

    pub fn value(&self, k: usize) -> Result<DVector<f64>> {
        Ok(DVector::from_column_slice(self.slot(k)?))
    }

    /// `value(k) - value(k - P)`.
    pub fn delta(&self, k: usize) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.width);
        self.delta_into(k, out.as_mut_slice())?;
        Ok(out)
    }

    fn delta_into(&self, k: usize, out: &mut [f64]) -> Result<()> {
        if k < self.period {
            return Err(Error::NotReady(format!("delta at {k} needs a full period of history")));
        }
        let now = self.slot(k)?;
        let before = self.slot(k - self.period)?;
        for ((o, a), b) in out.iter_mut().zip(now).zip(before) {
            *o = a - b;
        }
        Ok(())
    }

    /// Stacks `delta(k), …, delta(k + p - 1)` oldest first.
    pub fn stacked_delta(&self, k: usize, p: usize) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(p * self.width);
        for i in 0..p {
            let rows = i * self.width..(i + 1) * self.width;
            self.delta_into(k + i, &mut out.as_mut_slice()[rows])?;
        }
        Ok(out)
    }
}

/// Past-window regressor pieces: `δU(p)_k` and `δY(p)_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedWindow {
    pub du: DVector<f64>,
    pub dy: DVector<f64>,
    pub p: usize,
}

/// Paired input/output histories sharing one clock.
#[derive(Debug, Clone)]
pub struct SignalHistory {
    clock: PeriodClock,
    past_window: usize,
    u: DeltaBuffer,
    y: DeltaBuffer,
}

impl SignalHistory {
    /// Buffers hold `P + p + 1` samples: enough for the newest target `δy(k)`
    /// and its regressor window `k - p … k - 1`.
    pub fn new(clock: PeriodClock, inputs: usize, outputs: usize, past_window: usize) -> Result<Self> {
        if past_window == 0 {
            return Err(config("past window must be at least one sample"));
        }
        let period = clock.samples_per_period();
        let capacity = period + past_window + 1;
        Ok(Self {
            clock,
            past_window,
            u: DeltaBuffer::new(period, inputs, capacity)?,
            y: DeltaBuffer::new(period, outputs, capacity)?,
        })
    }

    pub fn clock(&self) -> &PeriodClock {
        &self.clock
    }

    pub fn past_window(&self) -> usize {
        self.past_window
    }

    pub fn inputs(&self) -> &DeltaBuffer {
        &self.u
    }

    pub fn outputs(&self) -> &DeltaBuffer {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn push_sample(&mut self, u: &[f64], y: &[f64]) -> Result<()> {
        if u.len() != self.u.width() || y.len() != self.y.width() {
            return Err(config(format!(
                "sample widths ({}, {}) do not match ({}, {})",
                u.len(),
                y.len(),
                self.u.width(),
                self.y.width()
            )));
        }
        self.u.push(u)?;
        self.y.push(y)?;
        Ok(())
    }

    /// Input and output windows covering samples `k … k + p - 1`.
    pub fn stacked_windows(&self, k: usize, p: usize) -> Result<StackedWindow> {
        Ok(StackedWindow { du: self.u.stacked_delta(k, p)?, dy: self.y.stacked_delta(k, p)?, p })
    }

    /// The newest identification pair: the regressor window ending just before
    /// the latest sample, and that sample's output delta. `None` until the
    /// history is deep enough.
    pub fn latest_pair(&self) -> Option<(StackedWindow, DVector<f64>)> {
        let period = self.clock.samples_per_period();
        let n = self.len();
        if n < period + self.past_window + 1 {
            return None;
        }
        let k = n - 1;
        let window = self.stacked_windows(k - self.past_window, self.past_window).ok()?;
        let target = self.y.delta(k).ok()?;
        Some((window, target))
    }
}
