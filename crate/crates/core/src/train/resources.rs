use std::time::Instant;

/// Wall clock since creation and the largest resident set seen so far.
#[derive(Debug, Clone)]
pub struct ResourceTracker {
    start: Instant,
    peak_bytes: u64,
}

impl Default for ResourceTracker {
    fn default() -> Self {
        Self::start()
    }
}

impl ResourceTracker {
    pub fn start() -> Self {
        let mut t = Self {
            start: Instant::now(),
            peak_bytes: 0,
        };
        t.sample();
        t
    }

    /// Reads the current resident set and folds it into the peak.
    pub fn sample(&mut self) {
        if let Some(rss) = current_rss_bytes() {
            self.peak_bytes = self.peak_bytes.max(rss);
        }
    }

    pub fn seconds(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    pub fn peak_bytes(&self) -> u64 {
        self.peak_bytes
    }

    /// `(wall seconds, peak resident bytes)`.
    pub fn track(&mut self) -> (f64, u64) {
        self.sample();
        (self.seconds(), self.peak_bytes)
    }
}

fn status_field(key: &str) -> Option<u64> {
    let text = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = text.lines().find(|l| l.starts_with(key))?;
    let kb: u64 = line[key.len()..].trim().trim_end_matches("kB").trim().parse().ok()?;
    Some(kb * 1024)
}

/// Resident set size of this process, where the platform exposes it.
pub fn current_rss_bytes() -> Option<u64> {
    status_field("VmRSS:")
}

/// High-water resident set of this process since it started.
pub fn process_peak_rss_bytes() -> Option<u64> {
    status_field("VmHWM:")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starts_near_zero() {
        let mut t = ResourceTracker::start();
        let (s, _) = t.track();
        assert!(s < 0.5);
    }

    #[test]
    #[cfg(target_os = "linux")]
    fn sees_a_large_allocation() {
        let mut t = ResourceTracker::start();
        let before = t.peak_bytes();
        let buf = vec![1u8; 100 << 20];
        t.sample();
        assert!(t.peak_bytes() >= before + (90 << 20), "{} vs {}", t.peak_bytes(), before);
        assert_eq!(buf.iter().map(|&b| b as u64).sum::<u64>(), 100 << 20);
    }
}
