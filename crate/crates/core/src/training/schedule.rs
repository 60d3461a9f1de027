/// Inverse decay from the initial rate: `lr0 · (1 + ν·b)^(−p)`.
pub fn lr_schedule(lr0: f64, decay_rate: f64, decay_power: f64, batch: u64) -> f64 {
    lr0 * (1.0 + decay_rate * batch as f64).powf(-decay_power)
}
