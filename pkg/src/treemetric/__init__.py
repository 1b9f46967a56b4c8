"""treemetric: learn embeddings whose distances behave like tree metrics,
then reconstruct and score leaf-labeled trees.

The package splits into small, composable layers: `trees` (structures and
path metrics), `treeio` (Newick and CSV), `simulate` (synthetic lineage
data), `quartets` (supervision combinatorics), `reconstruct` (neighbor
joining and edge fitting), `metrics` (RF/quartet distances), `learn` (the
quartet metric-learning core), and `harness` (experiment plumbing + CLI).
"""

from .errors import (
    ConfigError,
    ConvergenceError,
    DataError,
    DegenerateInputError,
    IngestionError,
    NewickParseError,
    NumericalError,
    QuartetError,
    SupervisionError,
    TrainingDivergedError,
    TreemetricError,
)
from .trees import (
    Bipartition,
    FourPointResult,
    QuartetTopology,
    Tree,
    TreeStats,
    bipartitions,
    check_four_point,
    induced_quartet_topology,
    min_edge_length,
    path_distance_matrix,
    tree_stats,
)
from .treeio import (
    FeatureTable,
    aggregate_by_group,
    load_feature_csv,
    parse_newick,
    permute_dataset,
    save_feature_csv,
    write_newick,
)
from .quartets import (
    LabelClass,
    LabelPrior,
    PartitionPrior,
    QuartetSums,
    balanced_unknown_fraction,
    classify_by_labels,
    classify_by_partition,
    distance_sums,
    enumerate_quartets,
    exact_known_counts,
    labeled_fraction_curve,
    resolve_from_partition,
    sample_quartets,
    theoretical_partition_proportions,
)
from .reconstruct import (
    AttesonCheck,
    NnlsFit,
    atteson_certified,
    fit_edge_lengths_nnls,
    neighbor_joining,
    path_matrix,
)
from .metrics import (
    EvalReport,
    delta_percent,
    evaluate_trees,
    quartet_distance,
    rf_distance,
    stratified_qd,
)
from .simulate import (
    Dataset,
    SimulationConfig,
    alternative_tree_noise,
    brownian_signals,
    empirical_distance_matrix,
    full_binary_topology,
    gaussian_noise_features,
    make_supervised_replicate,
    random_binary_topology,
    sample_edge_lengths,
    simulate_dataset,
)
from .learn import (
    EmbeddingModel,
    LossConfig,
    Supervision,
    TrainHistory,
    TrainSettings,
    deviation_loss,
    forward,
    gate_sample,
    quadruplet_loss,
    quartet_loss,
    sparsity_penalty,
    total_objective,
    train,
    triplet_loss,
)

__version__ = "0.1.0"
