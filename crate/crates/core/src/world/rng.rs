use serde::{Deserialize, Serialize};

/// Counter-based generator: the output for a given (key, counter) is a pure function,
/// so the whole generator state is two integers that serialize exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CounterRng {
    pub key: u64,
    pub counter: u64,
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self {
            key: mix(seed ^ 0x9e37_79b9_7f4a_7c15),
            counter: 0,
        }
    }

    /// Value at an arbitrary position without advancing.
    pub fn at(&self, counter: u64) -> u64 {
        mix(self.key ^ mix(counter.wrapping_add(0x9e37_79b9_7f4a_7c15)))
    }

    pub fn peek(&self) -> u64 {
        self.at(self.counter)
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = self.peek();
        self.counter = self.counter.wrapping_add(1);
        v
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}
