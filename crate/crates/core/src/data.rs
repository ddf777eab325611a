//! Tables compiled into the library.

/// `R,G,B<TAB>word` for the 150 ADE20K scene-parsing classes, in label order.
pub const ADE20K_PALETTE: &str = include_str!("../data/ade20k_palette.tsv");

/// `child<TAB>parent` hypernym edges covering every ADE20K class word.
pub const ADE20K_TAXONOMY: &str = include_str!("../data/ade20k_taxonomy.tsv");

/// `from<TAB>to` replacements for class words missing from the taxonomy.
pub const ADE20K_SUBSTITUTIONS: &str = include_str!("../data/substitutions.tsv");
