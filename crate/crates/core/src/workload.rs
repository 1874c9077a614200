//! Operation streams executed by the tracked process.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Zipf};
use serde::{Deserialize, Serialize};

use crate::addr::Gva;
use crate::size::ByteSize;

/// First page of the tracked region.
pub const REGION_BASE: u64 = 0x1_0000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Op {
    /// Store to a page (demand-mapped if absent).
    Write(Gva),
    /// Pure computation for the given number of µs.
    Compute(f64),
    Unmap(Gva),
    /// The kernel moves the page to a new frame, keeping its contents.
    Relocate(Gva),
    /// mremap-style move of a mapping to another address.
    Move {
        from: Gva,
        to: Gva,
    },
    /// End of a monitoring interval: collect (and dump, if checkpointing).
    Checkpoint,
}

impl Op {
    /// Compute time the op costs the tracked process when untracked.
    pub fn compute_us(&self, write_us: f64) -> f64 {
        match self {
            Op::Write(_) => write_us,
            Op::Compute(us) => *us,
            _ => 0.0,
        }
    }
}

/// A workload: pages mapped before launch plus the op stream.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub premapped: Vec<Gva>,
    pub ops: Vec<Op>,
}

impl Workload {
    pub fn ideal_us(&self, write_us: f64) -> f64 {
        self.ops.iter().map(|o| o.compute_us(write_us)).fold(0.0, |a, b| a + b)
    }

    pub fn writes(&self) -> usize {
        self.ops.iter().filter(|o| matches!(o, Op::Write(_))).count()
    }
}

/// The array-walking micro-benchmark: one write per page per round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MicroBenchSpec {
    pub memory: ByteSize,
    pub rounds: u32,
    /// Kernel page relocations per second of run time.
    pub churn_rate: f64,
    /// Collect after every round (each round is one monitoring interval).
    pub checkpoint_each_round: bool,
}

impl Default for MicroBenchSpec {
    fn default() -> Self {
        MicroBenchSpec {
            memory: ByteSize::mb(100),
            rounds: 1,
            churn_rate: 0.0,
            checkpoint_each_round: false,
        }
    }
}

impl MicroBenchSpec {
    pub fn new(memory: ByteSize) -> Self {
        MicroBenchSpec {
            memory,
            ..Default::default()
        }
    }

    pub fn num_pages(&self) -> u64 {
        self.memory.pages().max(1)
    }

    pub fn build(&self, write_us: f64, seed: u64) -> Workload {
        let n = self.num_pages();
        let pages: Vec<Gva> = (0..n).map(|i| Gva(REGION_BASE + i)).collect();
        let mut churn = Churn::new(self.churn_rate, seed, pages.clone());
        let mut ops = Vec::with_capacity((n * u64::from(self.rounds)) as usize);
        for _ in 0..self.rounds {
            for p in &pages {
                ops.push(Op::Write(*p));
                churn.advance(write_us, &mut ops);
            }
            if self.checkpoint_each_round {
                ops.push(Op::Checkpoint);
            }
        }
        Workload { premapped: pages, ops }
    }
}

/// Working-set footprints of the key-value engines used as real workloads.
pub const KV_FOOTPRINTS: [(&str, ByteSize); 5] = [
    ("baby", ByteSize(833_000_000)),
    ("cache", ByteSize(596_000_000)),
    ("stdhash", ByteSize(2_400_000_000)),
    ("stdtree", ByteSize(2_400_000)),
    ("tiny", ByteSize(2_200_000_000)),
];

/// Synthetic key-value store: zipf-skewed page writes over a footprint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KvWorkloadSpec {
    pub footprint: ByteSize,
    pub write_skew: f64,
    pub churn_rate: f64,
    pub requests: u64,
    /// Non-write work per request, µs.
    pub request_us: f64,
    /// Requests between checkpoints; 0 disables intermediate checkpoints.
    pub checkpoint_every: u64,
}

impl Default for KvWorkloadSpec {
    fn default() -> Self {
        KvWorkloadSpec {
            footprint: ByteSize(2_400_000),
            write_skew: 0.99,
            churn_rate: 0.0,
            requests: 100_000,
            request_us: 2.0,
            checkpoint_every: 0,
        }
    }
}

impl KvWorkloadSpec {
    pub fn engine(name: &str) -> Option<Self> {
        KV_FOOTPRINTS
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, f)| KvWorkloadSpec {
                footprint: *f,
                ..Default::default()
            })
    }

    pub fn build(&self, write_us: f64, seed: u64) -> Workload {
        let n = self.footprint.pages().max(1);
        let pages: Vec<Gva> = (0..n).map(|i| Gva(REGION_BASE + i)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zipf = Zipf::new(n as f64, self.write_skew).expect("valid zipf parameters");
        let mut churn = Churn::new(self.churn_rate, seed ^ 0x9e37_79b9, pages.clone());
        // Hot keys are scattered over the footprint rather than packed at
        // the start of the region.
        let stride = coprime_stride(n);
        let mut ops = Vec::with_capacity(self.requests as usize * 2);
        for r in 0..self.requests {
            let rank = zipf.sample(&mut rng) as u64 - 1;
            let page = pages[((rank * stride) % n) as usize];
            ops.push(Op::Write(page));
            if self.request_us > 0.0 {
                ops.push(Op::Compute(self.request_us));
            }
            churn.advance(write_us + self.request_us, &mut ops);
            if self.checkpoint_every > 0 && (r + 1) % self.checkpoint_every == 0 {
                ops.push(Op::Checkpoint);
            }
        }
        Workload { premapped: pages, ops }
    }
}

fn coprime_stride(n: u64) -> u64 {
    fn gcd(a: u64, b: u64) -> u64 {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    let mut s = (n as f64 * 0.618_034) as u64 | 1;
    while s > 1 && gcd(s, n) != 1 {
        s += 2;
    }
    s.max(1)
}

/// Poisson stream of relocations placed by elapsed compute time.
struct Churn {
    exp: Option<Exp<f64>>,
    rng: ChaCha8Rng,
    pages: Vec<Gva>,
    t: f64,
    next: f64,
}

impl Churn {
    fn new(rate_per_s: f64, seed: u64, pages: Vec<Gva>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let exp = (rate_per_s > 0.0 && !pages.is_empty()).then(|| Exp::new(rate_per_s / 1e6).expect("positive rate"));
        let next = exp.as_ref().map_or(f64::INFINITY, |e| e.sample(&mut rng));
        Churn {
            exp,
            rng,
            pages,
            t: 0.0,
            next,
        }
    }

    fn advance(&mut self, us: f64, ops: &mut Vec<Op>) {
        self.t += us;
        let Some(exp) = self.exp else { return };
        while self.next <= self.t {
            let p = self.pages[self.rng.random_range(0..self.pages.len())];
            ops.push(Op::Relocate(p));
            self.next += exp.sample(&mut self.rng);
        }
    }
}

/// Workload of the missed-address experiment: the working set is written
/// once, then the process computes until the interval ends; relocations
/// arrive throughout. One collection at the end of the interval.
pub fn missed_pages_workload(
    working_set: ByteSize,
    interval_us: f64,
    churn_rate: f64,
    write_us: f64,
    seed: u64,
) -> Workload {
    let n = working_set.pages().max(1);
    let pages: Vec<Gva> = (0..n).map(|i| Gva(REGION_BASE + i)).collect();
    let mut churn = Churn::new(churn_rate, seed, pages.clone());
    let mut ops = Vec::new();
    for p in &pages {
        ops.push(Op::Write(*p));
        churn.advance(write_us, &mut ops);
    }
    let step: f64 = 100.0;
    let mut t = n as f64 * write_us;
    while t < interval_us {
        let d = step.min(interval_us - t);
        ops.push(Op::Compute(d));
        churn.advance(d, &mut ops);
        t += d;
    }
    ops.push(Op::Checkpoint);
    Workload { premapped: pages, ops }
}
