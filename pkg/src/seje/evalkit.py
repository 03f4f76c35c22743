"""Cross-modal retrieval evaluation: Euclidean ranking, MedR, R@K, and the
multi-subset sampling protocol in both retrieval directions.

MedR of 1.0 means every query's true match ranks first. For an even number of
queries the median is the mean of the two central ranks, which is why reported
MedR values can be fractional. The protocol samples `trials` distinct index
subsets of the test set (without replacement inside a trial) and aggregates
per-trial metrics by both mean and median.
"""

from dataclasses import dataclass, field

import numpy as np

from .common import ConfigError, require

DIRECTIONS = ("image_to_recipe", "recipe_to_image")
DEFAULT_KS = (1, 5, 10)


@dataclass
class RetrievalReport:
    direction: str
    subset_size: int
    trials: int
    medr_per_trial: list
    recall_per_trial: dict          # K -> list of percentages, one per trial
    medr_mean: float = field(init=False)
    medr_median: float = field(init=False)
    recall_mean: dict = field(init=False)

    def __post_init__(self):
        require(self.direction in DIRECTIONS, f"unknown direction {self.direction!r}")
        self.medr_mean = float(np.mean(self.medr_per_trial))
        self.medr_median = float(np.median(self.medr_per_trial))
        self.recall_mean = {k: float(np.mean(v)) for k, v in self.recall_per_trial.items()}
        for medr in self.medr_per_trial:
            require(1.0 <= medr <= self.subset_size, "MedR outside [1, subset_size]")
        ks = sorted(self.recall_per_trial)
        for t in range(self.trials):
            values = [self.recall_per_trial[k][t] for k in ks]
            require(all(0.0 <= v <= 100.0 for v in values), "R@K outside [0, 100]")
            require(all(a <= b + 1e-12 for a, b in zip(values, values[1:])),
                    "R@K must be monotone in K")

    def record(self):
        return {
            "direction": self.direction,
            "subset_size": self.subset_size,
            "trials": self.trials,
            "medr_per_trial": self.medr_per_trial,
            "medr_mean": self.medr_mean,
            "medr_median": self.medr_median,
            **{f"r@{k}_mean": v for k, v in sorted(self.recall_mean.items())},
        }


def rank(query, candidates):
    """Candidate indices by ascending Euclidean distance; ties break to the
    lower index; deterministic."""
    candidates = np.asarray(candidates, dtype=np.float64)
    if candidates.ndim != 2 or candidates.shape[0] == 0:
        raise ConfigError("candidates must be a non-empty M x d matrix")
    query = np.asarray(query, dtype=np.float64)
    if query.shape[-1] != candidates.shape[1]:
        raise ConfigError(f"query dim {query.shape[-1]} != candidate dim {candidates.shape[1]}")
    distances = np.sqrt(((candidates - query[None, :]) ** 2).sum(axis=1))
    return np.argsort(distances, kind="stable")


def _ranks_of_truth(queries, candidates):
    """1-based rank of candidate i for query i, for all i at once."""
    diff = queries[:, None, :] - candidates[None, :, :]
    distances = np.sqrt((diff ** 2).sum(axis=2))
    m = distances.shape[0]
    truth = distances[np.arange(m), np.arange(m)]
    # rank = 1 + number of candidates strictly closer, + ties at lower index
    closer = (distances < truth[:, None]).sum(axis=1)
    tied_lower = ((distances == truth[:, None]) & (np.arange(m)[None, :] < np.arange(m)[:, None])).sum(axis=1)
    return closer + tied_lower + 1


def evaluate_subset(recipe_embs, image_embs, ks=DEFAULT_KS):
    """MedR and R@K for both retrieval directions over matched M x d matrices.

    Row i of the two matrices is a matched pair; the rank of the true match is
    computed for each query and summarized.
    """
    recipe_embs = np.asarray(recipe_embs, dtype=np.float64)
    image_embs = np.asarray(image_embs, dtype=np.float64)
    require(recipe_embs.shape == image_embs.shape and recipe_embs.ndim == 2,
            "embedding matrices must be matched M x d")
    m = recipe_embs.shape[0]
    if m < max(ks):
        raise ConfigError(f"subset size {m} smaller than max K {max(ks)}")

    results = {}
    for direction, (queries, candidates) in (
        ("image_to_recipe", (image_embs, recipe_embs)),
        ("recipe_to_image", (recipe_embs, image_embs)),
    ):
        ranks = _ranks_of_truth(queries, candidates)
        medr = float(np.median(ranks))
        recalls = {k: float(100.0 * (ranks <= k).mean()) for k in ks}
        results[direction] = {"medr": medr, "recall": recalls, "ranks": ranks}
    return results


def evaluate_protocol(recipe_embs, image_embs, subset_size, trials=10, seed=0,
                      ks=DEFAULT_KS, keep_ranks=False):
    """Sample `trials` distinct subsets of matched pairs and evaluate each.

    Sampling is without replacement within a trial; distinct subsets are
    enforced by re-drawing on collision (when only one subset is possible,
    duplicates are accepted after bounded retries). Returns one report per
    direction, keyed by direction name. With `keep_ranks` each report carries
    a `ranks_per_trial` attribute for downstream plotting.
    """
    recipe_embs = np.asarray(recipe_embs, dtype=np.float64)
    image_embs = np.asarray(image_embs, dtype=np.float64)
    m = recipe_embs.shape[0]
    if subset_size > m:
        raise ConfigError(f"subset_size {subset_size} exceeds test set size {m}")
    require(trials >= 1, "trials must be >= 1")

    rng = np.random.default_rng(seed)
    chosen = set()
    subsets = []
    for _ in range(trials):
        for _ in range(20):
            idx = np.sort(rng.choice(m, size=subset_size, replace=False))
            key = idx.tobytes()
            if key not in chosen:
                chosen.add(key)
                break
        subsets.append(idx)

    medr = {d: [] for d in DIRECTIONS}
    recall = {d: {k: [] for k in ks} for d in DIRECTIONS}
    ranks = {d: [] for d in DIRECTIONS}
    for idx in subsets:
        per = evaluate_subset(recipe_embs[idx], image_embs[idx], ks=ks)
        for d in DIRECTIONS:
            medr[d].append(per[d]["medr"])
            for k in ks:
                recall[d][k].append(per[d]["recall"][k])
            if keep_ranks:
                ranks[d].append(per[d]["ranks"])

    reports = {
        d: RetrievalReport(direction=d, subset_size=subset_size, trials=trials,
                           medr_per_trial=medr[d], recall_per_trial=recall[d])
        for d in DIRECTIONS
    }
    if keep_ranks:
        for d in DIRECTIONS:
            reports[d].ranks_per_trial = ranks[d]
    return reports
