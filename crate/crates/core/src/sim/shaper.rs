/// Token bucket measured in bits. A packet conforms when the bucket holds
/// at least its size.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBucket {
    rate_bps: f64,
    capacity_bits: f64,
    tokens: f64,
    last_s: f64,
}

impl TokenBucket {
    /// A full bucket as of `now_s`.
    pub fn new(rate_bps: f64, capacity_bits: f64, now_s: f64) -> Self {
        Self {
            rate_bps,
            capacity_bits,
            tokens: capacity_bits,
            last_s: now_s,
        }
    }

    pub fn try_consume(&mut self, now_s: f64, bits: f64) -> bool {
        if now_s > self.last_s {
            self.tokens = (self.tokens + (now_s - self.last_s) * self.rate_bps).min(self.capacity_bits);
            self.last_s = now_s;
        }
        if self.tokens >= bits {
            self.tokens -= bits;
            true
        } else {
            false
        }
    }

    pub fn rate_bps(&self) -> f64 {
        self.rate_bps
    }
}
