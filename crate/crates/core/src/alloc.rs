//! Global channel ordering by average trace, ratio-to-bit-assignment along
//! that order, compression accounting, and hard budget enforcement.
//!
//! Bits are assigned 2 -> 7 in steps; each step's action is a fraction of the
//! REMAINING element count, taken as whole channels from the low-trace end of
//! the remaining list, and everything left after the bit-7 step gets 8 bits.
//! The budget feasibility test charges all still-unassigned elements at the
//! 8-bit cap, so an over-budget proposal is repaired at the earliest step by
//! raising the low-bit ratio just enough (the smallest monotone change).

use crate::error::{Error, Result};
use crate::model::ChannelKey;
use crate::trace::{Granularity, TraceReport, TraceTarget};
use serde::{Deserialize, Serialize};

pub const BITS_LOW: u8 = 2;
pub const BITS_HIGH: u8 = 8;
/// Ratio steps: bits 2..=7 (the remainder is fixed at 8).
pub const RATIO_STEPS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyTarget {
    Weights,
    Activations,
}

impl From<TraceTarget> for PolicyTarget {
    fn from(t: TraceTarget) -> Self {
        match t {
            TraceTarget::Weights => PolicyTarget::Weights,
            TraceTarget::Activations => PolicyTarget::Activations,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SortedEntry {
    pub layer: String,
    pub channel: usize,
    pub average: f64,
    pub elements: usize,
}

/// Global descending ordering of channels by average trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SortedChannelList {
    pub target: PolicyTarget,
    pub entries: Vec<SortedEntry>,
    /// cumulative[i] = total elements of entries[0..=i]; strictly increasing.
    pub cumulative: Vec<usize>,
    pub total_elements: usize,
}

/// Sort a channel-granularity trace report into the global allocation order:
/// average trace descending, ties by (layer id, channel index) ascending.
pub fn sort_channels(report: &TraceReport) -> Result<SortedChannelList> {
    if report.granularity != Granularity::Channel {
        return Err(Error::Invalid(
            "sort_channels requires a channel-granularity report".into(),
        ));
    }
    let mut entries: Vec<SortedEntry> = report
        .entries
        .iter()
        .map(|e| {
            let channel = e.channel.ok_or_else(|| {
                Error::Invalid(format!("entry for layer {} has no channel index", e.layer))
            })?;
            if e.elements == 0 {
                return Err(Error::Invalid(format!(
                    "channel {}:{channel} has zero elements",
                    e.layer
                )));
            }
            Ok(SortedEntry {
                layer: e.layer.clone(),
                channel,
                average: e.average,
                elements: e.elements,
            })
        })
        .collect::<Result<_>>()?;
    entries.sort_by(|a, b| {
        b.average
            .total_cmp(&a.average)
            .then_with(|| a.layer.cmp(&b.layer))
            .then_with(|| a.channel.cmp(&b.channel))
    });
    let mut cumulative = Vec::with_capacity(entries.len());
    let mut total = 0usize;
    for e in &entries {
        total += e.elements;
        cumulative.push(total);
    }
    Ok(SortedChannelList {
        target: report.target.into(),
        entries,
        cumulative,
        total_elements: total,
    })
}

/// Ratio vector, per-channel bit assignment and compression statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantPolicy {
    pub target: PolicyTarget,
    /// Realized fraction of the then-remaining elements taken at bits 2..=7.
    pub ratios: [f64; RATIO_STEPS],
    /// (channel, bits) in sorted-list order.
    pub assignment: Vec<(ChannelKey, u8)>,
    pub avg_bits: f64,
    pub compression: f64,
    pub size_bits: u64,
    pub total_elements: usize,
}

impl QuantPolicy {
    pub fn bits_for(&self, layer: &str, channel: usize) -> Option<u8> {
        self.assignment
            .iter()
            .find(|(k, _)| k.layer == layer && k.channel == channel)
            .map(|(_, b)| *b)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("policy serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Data(format!("policy parse: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionStats {
    pub avg_bits: f64,
    pub compression: f64,
    pub size_bits: u64,
}

/// Element-weighted average bits, 32/avg compression, total size in bits.
pub fn compression_stats(policy: &QuantPolicy) -> CompressionStats {
    CompressionStats {
        avg_bits: policy.avg_bits,
        compression: policy.compression,
        size_bits: policy.size_bits,
    }
}

/// Model size in binary MB (2^20 bytes) for a parameter count at an average
/// bit width.
pub fn size_mb(elements: usize, avg_bits: f64) -> f64 {
    elements as f64 * avg_bits / 8.0 / (1024.0 * 1024.0)
}

/// Outcome of resolving one allocation step.
#[derive(Debug, Clone, Copy)]
pub struct StepResolution {
    /// Whole channels taken from the low-trace end of the remaining list.
    pub channels: usize,
    /// Elements those channels contain.
    pub elements: usize,
    /// The action after clamping (equals the proposal when feasible).
    pub action: f64,
    pub clamped: bool,
}

/// In-progress allocation along a sorted channel list.
#[derive(Debug, Clone)]
pub struct AllocationRun<'a> {
    sorted: &'a SortedChannelList,
    /// entries[boundary..] are assigned; entries[..boundary] remain.
    boundary: usize,
    assigned_bits: u64,
    /// (bits, start, end) segments over sorted positions, in assignment order.
    segments: Vec<(u8, usize, usize)>,
    ratios: [f64; RATIO_STEPS],
    step: usize,
}

impl<'a> AllocationRun<'a> {
    pub fn new(sorted: &'a SortedChannelList) -> Self {
        AllocationRun {
            sorted,
            boundary: sorted.entries.len(),
            assigned_bits: 0,
            segments: Vec::new(),
            ratios: [0.0; RATIO_STEPS],
            step: 0,
        }
    }

    pub fn current_bits(&self) -> u8 {
        BITS_LOW + self.step as u8
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn is_complete(&self) -> bool {
        self.step >= RATIO_STEPS
    }

    pub fn remaining_channels(&self) -> usize {
        self.boundary
    }

    pub fn remaining_elements(&self) -> usize {
        if self.boundary == 0 {
            0
        } else {
            self.sorted.cumulative[self.boundary - 1]
        }
    }

    pub fn assigned_size_bits(&self) -> u64 {
        self.assigned_bits
    }

    /// The segment taken by the previous step, as [start, end) sorted positions.
    pub fn last_segment(&self) -> (usize, usize) {
        self.segments.last().map_or((0, 0), |&(_, s, e)| (s, e))
    }

    /// Elements in the last `t` channels of the remaining prefix.
    fn tail_elements(&self, t: usize) -> usize {
        let hi = self.remaining_elements();
        let lo = if t >= self.boundary {
            0
        } else {
            self.sorted.cumulative[self.boundary - t - 1]
        };
        hi - lo
    }

    /// Whole-channel count whose element total is nearest to `frac` of the
    /// remaining elements (ties prefer fewer channels).
    fn channels_for_fraction(&self, frac: f64) -> usize {
        let target = frac * self.remaining_elements() as f64;
        let mut best_t = 0usize;
        let mut best_d = (0.0 - target).abs();
        for t in 1..=self.boundary {
            let d = (self.tail_elements(t) as f64 - target).abs();
            if d < best_d {
                best_d = d;
                best_t = t;
            }
        }
        best_t
    }

    /// Minimal final model size if `t` channels take the current bits and all
    /// still-unassigned elements are charged at the 8-bit cap.
    fn projected_size(&self, bits: u8, t: usize) -> u64 {
        let seg = self.tail_elements(t) as u64;
        let rest = (self.remaining_elements() - self.tail_elements(t)) as u64;
        self.assigned_bits + seg * bits as u64 + rest * BITS_HIGH as u64
    }

    /// Resolve one step: round the action to whole channels, then raise it by
    /// the smallest amount that keeps the (remainder-at-8-bits) projection
    /// within `budget_bits`. `None` budget skips the feasibility repair.
    pub fn resolve_step(&self, action: f64, budget_bits: Option<f64>) -> Result<StepResolution> {
        if self.is_complete() {
            return Err(Error::Invalid("allocation already complete".into()));
        }
        if !(0.0..=1.0).contains(&action) || action.is_nan() {
            return Err(Error::Invalid(format!("action must be in [0, 1], got {action}")));
        }
        let bits = self.current_bits();
        let t_prop = if self.boundary == 0 {
            0
        } else {
            self.channels_for_fraction(action)
        };
        let (t, clamped) = match budget_bits {
            None => (t_prop, false),
            Some(budget) => {
                if (self.projected_size(bits, t_prop) as f64) <= budget {
                    (t_prop, false)
                } else {
                    let mut t_min = None;
                    for t in t_prop + 1..=self.boundary {
                        if (self.projected_size(bits, t) as f64) <= budget {
                            t_min = Some(t);
                            break;
                        }
                    }
                    let t = t_min.ok_or_else(|| {
                        Error::Budget(format!(
                            "no feasible allocation at bit {bits}: even taking all remaining \
                             channels exceeds {budget} bits"
                        ))
                    })?;
                    (t, true)
                }
            }
        };
        let elements = self.tail_elements(t);
        let action_out = if clamped {
            elements as f64 / self.remaining_elements() as f64
        } else {
            action
        };
        Ok(StepResolution {
            channels: t,
            elements,
            action: action_out,
            clamped,
        })
    }

    /// Apply a resolved step: the chosen channels take the current bit width.
    pub fn apply_step(&mut self, res: StepResolution) {
        let bits = self.current_bits();
        let start = self.boundary - res.channels;
        self.segments.push((bits, start, self.boundary));
        self.assigned_bits += res.elements as u64 * bits as u64;
        self.ratios[self.step] = res.action;
        self.boundary = start;
        self.step += 1;
    }

    /// Assign the remainder 8 bits and build the policy.
    pub fn finish(&self) -> Result<QuantPolicy> {
        if !self.is_complete() {
            return Err(Error::Invalid(format!(
                "allocation has run {} of {RATIO_STEPS} steps",
                self.step
            )));
        }
        let mut bits_at = vec![BITS_HIGH; self.sorted.entries.len()];
        for &(bits, s, e) in &self.segments {
            for b in &mut bits_at[s..e] {
                *b = bits;
            }
        }
        let mut size: u64 = 0;
        let mut assignment = Vec::with_capacity(bits_at.len());
        for (entry, &bits) in self.sorted.entries.iter().zip(&bits_at) {
            size += entry.elements as u64 * bits as u64;
            assignment.push((
                ChannelKey {
                    layer: entry.layer.clone(),
                    channel: entry.channel,
                },
                bits,
            ));
        }
        let total = self.sorted.total_elements;
        let avg = size as f64 / total as f64;
        Ok(QuantPolicy {
            target: self.sorted.target,
            ratios: self.ratios,
            assignment,
            avg_bits: avg,
            compression: 32.0 / avg,
            size_bits: size,
            total_elements: total,
        })
    }
}

/// Feasibility test + repair for one proposed action (see [`AllocationRun`]).
pub fn clamp_action(
    run: &AllocationRun,
    action: f64,
    budget_bits: f64,
) -> Result<f64> {
    Ok(run.resolve_step(action, Some(budget_bits))?.action)
}

/// Map six bit-ratio actions onto a concrete whole-channel assignment.
pub fn ratios_to_assignment(sorted: &SortedChannelList, actions: &[f64; RATIO_STEPS]) -> Result<QuantPolicy> {
    let mut run = AllocationRun::new(sorted);
    for &a in actions {
        let res = run.resolve_step(a, None)?;
        run.apply_step(res);
    }
    run.finish()
}

/// Uniform policy: every channel at `bits`.
pub fn uniform_policy(sorted: &SortedChannelList, bits: u8) -> Result<QuantPolicy> {
    if !(BITS_LOW..=BITS_HIGH).contains(&bits) {
        return Err(Error::Invalid(format!("bits must be in 2..=8, got {bits}")));
    }
    let mut actions = [0.0; RATIO_STEPS];
    if bits < BITS_HIGH {
        actions[(bits - BITS_LOW) as usize] = 1.0;
    }
    ratios_to_assignment(sorted, &actions)
}

/// Largest uniform bit width whose total size fits the budget.
pub fn max_uniform_bits_within(sorted: &SortedChannelList, budget_bits: f64) -> Result<u8> {
    for bits in (BITS_LOW..=BITS_HIGH).rev() {
        if (sorted.total_elements as u64 * bits as u64) as f64 <= budget_bits {
            return Ok(bits);
        }
    }
    Err(Error::Budget(format!(
        "budget {budget_bits} bits below the all-2-bit floor of {} elements",
        sorted.total_elements
    )))
}
