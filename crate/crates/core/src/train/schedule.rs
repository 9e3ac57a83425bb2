/// Linear warmup to `lr_max` at `warmup`, then inverse square-root decay:
/// `lr_max · min(step/warmup, sqrt(warmup/step))`, with `lr(0) = 0`.
pub fn lr_schedule(step: u64, lr_max: f64, warmup: u64) -> f64 {
    if step == 0 {
        return 0.0;
    }
    let (s, w) = (step as f64, warmup.max(1) as f64);
    lr_max * (s / w).min((w / s).sqrt())
}
