//! Counter-based Gaussian noise.
//!
//! Every draw is a pure function of `(seed, domain, step, index)`, so a
//! trajectory that skips model calls consumes exactly the same noise at the
//! steps it shares with the full trajectory.

/// Independent noise families derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    InitialNoise = 1,
    Ancestral = 2,
    Mixture = 3,
    Fixture = 4,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn key(seed: u64, domain: Domain, step: u64) -> u64 {
    let k = splitmix64(seed ^ 0xA076_1D64_78BD_642F);
    let k = splitmix64(k ^ (domain as u64).wrapping_mul(0xE703_7ED1_A0B4_28DB));
    splitmix64(k ^ step.wrapping_mul(0x8EBC_6AF0_9C88_C6E3))
}

/// Uniform in (0, 1), never exactly zero.
fn unit(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    pub fn new(seed: u64, domain: Domain, step: u64) -> Self {
        Self {
            key: key(seed, domain, step),
        }
    }

    pub fn uniform(&self, index: u64) -> f64 {
        unit(splitmix64(self.key ^ splitmix64(index)))
    }

    /// Standard normal draw for `index` (Box-Muller over two counter slots).
    pub fn normal(&self, index: u64) -> f64 {
        let u1 = self.uniform(index.wrapping_mul(2));
        let u2 = self.uniform(index.wrapping_mul(2).wrapping_add(1));
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normals(&self, n: usize) -> Vec<f64> {
        (0..n as u64).map(|i| self.normal(i)).collect()
    }
}
