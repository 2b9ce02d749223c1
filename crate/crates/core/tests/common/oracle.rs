use reachnet::model::ModelConfig;

/// Parameter count from the block description alone.
pub fn formula_param_count(c: &ModelConfig) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| k * k * cin * cout;
    let bn = |ch: usize| 2 * ch;
    let conv_bn = |cin: usize, cout: usize, k: usize| conv(cin, cout, k) + bn(cout);
    let filters: Vec<usize> = (0..c.depth).map(|i| (c.base_filters * 2usize.pow(i as u32)).min(c.max_filters)).collect();

    let mut total = conv_bn(c.in_channels, c.base_filters, 3) + conv_bn(c.base_filters, c.base_filters, 3);
    let mut prev = c.base_filters;
    for (f, &k) in filters.iter().zip(&c.down_factors) {
        total += conv_bn(prev, *f, k) + 2 * conv_bn(*f, *f, 3);
        prev = *f;
    }
    let d = prev;
    total += 4 * (d * d + d);
    if c.positional_embedding {
        total += c.attention_grid * c.attention_grid * d;
    }
    let mut skips = vec![c.base_filters];
    skips.extend(&filters[..c.depth - 1]);
    let mut cur = d;
    for &s in skips.iter().rev() {
        total += conv_bn(cur + s, s, 3) + conv_bn(s, s, 3);
        cur = s;
    }
    total + cur * c.out_channels + c.out_channels
}
