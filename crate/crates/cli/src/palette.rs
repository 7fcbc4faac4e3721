use u3ds3_core::PointCloud;

const BASE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [170, 110, 40],
];

/// Color of class `k`. Past the fixed table, colors come from a golden-angle
/// hue walk.
pub fn class_color(k: usize) -> [f64; 3] {
    if let Some(c) = BASE.get(k) {
        return c.map(|v| v as f64 / 255.0);
    }
    let h = (k as f64 * 0.618_033_988_75).fract() * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.2 + 0.7 * r, 0.2 + 0.7 * g, 0.2 + 0.7 * b]
}

/// Copy of `cloud` carrying `labels` and one color per class.
pub fn colorize(cloud: &PointCloud, labels: Vec<u32>, classes: usize) -> PointCloud {
    let table: Vec<[f64; 3]> = (0..classes.max(1)).map(class_color).collect();
    let colors = labels
        .iter()
        .map(|&l| table.get(l as usize).copied().unwrap_or_else(|| class_color(l as usize)))
        .collect();
    PointCloud {
        colors: Some(colors),
        gt_labels: Some(labels),
        ..cloud.clone()
    }
}
