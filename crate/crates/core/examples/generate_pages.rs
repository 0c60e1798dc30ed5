//! Pages with a requested compressibility, checked against the device's
//! deflate stage.

use dualstore::csd::EntryFormat;
use dualstore::workload::{device_ratio, generate_page, CompressibilitySpec, Generator};

fn main() {
    for target in [1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 8.0] {
        let spec = CompressibilitySpec::new(Generator::RepeatFill, target, 11);
        let got: Vec<f64> = (0..6).map(|i| device_ratio(&generate_page(&spec, i), 5, EntryFormat::V2)).collect();
        let worst = got.iter().map(|r| (r / target - 1.0).abs()).fold(0.0, f64::max);
        println!("repeat_fill target {target:>4}: {:.3?} (worst {:.1}% off)", got, 100.0 * worst);
    }
    let text = CompressibilitySpec::new(Generator::TextMix, 1.0, 11);
    println!("text_mix: {:.3}", device_ratio(&generate_page(&text, 0), 5, EntryFormat::V2));
    println!("random:   {:.3}", device_ratio(&generate_page(&CompressibilitySpec::random(11), 0), 5, EntryFormat::V2));
}
