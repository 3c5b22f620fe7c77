//! Model texts used by the simulation harness, the tests and the README.

/// Two factors with two indicators each; all loadings free, factor variances
/// fixed to 1, so `f1~~f2` is the latent correlation.
pub const TWO_FACTOR_STANDARDIZED: &str = "\
f1 =~ NA*y1 + y2
f2 =~ NA*y3 + y4
f1 ~~ 1*f1
f2 ~~ 1*f2
f1 ~~ f2
";

/// [`TWO_FACTOR_STANDARDIZED`] plus direct effects of a group dummy `g` on
/// every indicator.
pub const TWO_FACTOR_WITH_GROUP_EFFECTS: &str = "\
f1 =~ NA*y1 + y2
f2 =~ NA*y3 + y4
f1 ~~ 1*f1
f2 ~~ 1*f2
f1 ~~ f2
y1 ~ g
y2 ~ g
y3 ~ g
y4 ~ g
";

/// Four-wave quasi-simplex with one error variance `ev` shared by all waves.
pub const QUASI_SIMPLEX: &str = "\
f1 =~ 1*y1
f2 =~ 1*y2
f3 =~ 1*y3
f4 =~ 1*y4
f2 ~ f1
f3 ~ f2
f4 ~ f3
y1 ~~ ev*y1
y2 ~~ ev*y2
y3 ~~ ev*y3
y4 ~~ ev*y4
";

pub const HOLZINGER_SWINEFORD: &str = "\
visual  =~ x1 + x2 + x3
textual =~ x4 + x5 + x6
speed   =~ x7 + x8 + x9
";
