"""Correlation-grouping of highly correlated features for prediction models.

Highly correlated genes are clustered (sign-tracking K-Means pre-grouping,
then average-linkage hierarchical clustering under 1 - correlation), each
group is replaced by a signed-average representative, and an elastic-net
logistic model is fit on the representatives with the grouping threshold
chosen by cross-validated AUC.
"""

__version__ = "0.1.0"

from .data_model import (
    ExpressionMatrix,
    StandardizedMatrix,
    load_matrix,
    pearson,
    standardize,
    write_matrix,
)
from .elastic_net import EnetFit, cv_lambda, fit, lambda_max, predict_prob
from .hcluster import (
    Dendrogram,
    GroupingRule,
    build_dendrogram,
    cut_dendrogram,
    make_rule,
    representatives,
)
from .pipeline import (
    GroupedModel,
    ThresholdReport,
    auc,
    cv_threshold_sweep,
    expand_selection,
    fit_final,
    fit_grouped,
    fit_ungrouped,
    predict,
)
from .precluster import (
    PartitionSet,
    SignedClustering,
    cluster_genes,
    iterative_split,
    kmeans_init,
    modified_kmeans,
)
from .simbench import (
    BlueprintModel,
    MetricsRecord,
    SyntheticDesign,
    compute_metrics,
    jitter,
    make_blueprint,
    run_benchmark,
    simulate_phenotypes,
    synth_expression,
    wilcoxon_signed_rank,
)
