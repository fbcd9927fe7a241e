# summary_generator.py

import pandas as pd


def _is_non_increasing(values):
    values = list(values)
    return all(later <= earlier for earlier, later in zip(values, values[1:]))


def _format_architecture(row):
    return f"candidate {int(row['candidate_index'])} x {int(row['layers'])} layers"


def analyze_sweep(results: pd.DataFrame, setting_col: str, setting_label: str, k: int = 10) -> str:
    """Describe a sweep: per-setting medians, the architectures picked, and the FLOPs trend."""
    if results is None or results.empty:
        return "No sweep results were recorded.\n"

    grouped = results.groupby(setting_col)
    medians = grouped[['flops', 'test_recall', 'test_ndcg']].median()

    lines = [f"Sweep over {setting_label} ({len(medians)} settings, "
             f"{grouped.size().max()} seed(s) per setting):\n\n"]
    for setting, row in medians.iterrows():
        picks = grouped.get_group(setting).apply(_format_architecture, axis=1)
        counts = picks.value_counts()
        pick_texts = [f"{arch} ({n}x)" if n > 1 else arch for arch, n in counts.items()]
        lines.append(
            f"• {setting_label} = {setting}: median FLOPs {row['flops']:,.0f}, "
            f"median test Recall@{k} {row['test_recall']:.4f}, NDCG@{k} {row['test_ndcg']:.4f}"
            f" - selected {', '.join(pick_texts)}.\n"
        )

    lines.append("\n")
    if _is_non_increasing(medians['flops']):
        lines.append(f"Median selected FLOPs is non-increasing as {setting_label} grows.\n")
    else:
        lines.append(f"Median selected FLOPs is not monotone in {setting_label}.\n")

    architectures = results.apply(_format_architecture, axis=1).unique()
    if len(architectures) == 1:
        lines.append(f"Every run selected the same architecture ({architectures[0]}).\n")
    else:
        lines.append(f"Runs selected {len(architectures)} different architectures.\n")
    return ''.join(lines)


def analyze_run(test_report, baseline_report, num_items, flops=None) -> str:
    """Compare a retrained model's test metrics against the popularity baseline and random ranking."""
    k = test_report.k
    random_recall = min(1.0, k / num_items) if num_items else 0.0
    lines = [f"• Test Recall@{k} {test_report.recall_at_k:.4f}, MRR@{k} {test_report.mrr_at_k:.4f}, "
             f"NDCG@{k} {test_report.ndcg_at_k:.4f} over {test_report.count} users.\n"]
    if baseline_report.recall_at_k > 0:
        ratio = test_report.recall_at_k / baseline_report.recall_at_k
        lines.append(f"• Popularity baseline Recall@{k} {baseline_report.recall_at_k:.4f} "
                     f"- the retrained model reaches {ratio:.1f}x that.\n")
    else:
        lines.append(f"• Popularity baseline Recall@{k} is 0.\n")
    if random_recall > 0:
        lines.append(f"• Random ranking expects Recall@{k} {random_recall:.4f} "
                     f"- the retrained model reaches {test_report.recall_at_k / random_recall:.1f}x that.\n")
    if flops is not None:
        lines.append(f"• Selected architecture costs {flops:,} FLOPs per sequence.\n")
    return ''.join(lines)
