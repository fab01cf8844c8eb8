"""
Code stream statistics: token and bit accounting, per-step code histograms,
codebook utilization; exported as key=value lines, CSV tables and an HTML
chart.
"""

from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import plotly.graph_objects as go
from plotly.subplots import make_subplots

from codec_io import CodeStream
from training import UtilizationTracker, codebook_perplexity, utilization


def branch_trackers(stream: CodeStream, limits: Sequence[int]) -> List[UtilizationTracker]:
    """One tracker per branch, fed every code of every active step."""
    trackers = []
    for p, branch in enumerate(stream.codes):
        tracker = UtilizationTracker(limits[p])
        for grid in branch:
            tracker.record(grid.codes)
        trackers.append(tracker)
    return trackers


def histogram_frame(stream: CodeStream) -> pd.DataFrame:
    """Long table of (branch, step, side, code, count) for codes that occur."""
    rows = []
    for p, branch in enumerate(stream.codes):
        for i, grid in enumerate(branch):
            codes, counts = np.unique(grid.codes, return_counts=True)
            for code, count in zip(codes, counts):
                rows.append({
                    'branch': p,
                    'step': i,
                    'side': stream.resolutions[i],
                    'code': int(code),
                    'count': int(count),
                })
    return pd.DataFrame(rows, columns=['branch', 'step', 'side', 'code', 'count'])


def usage_frame(stream: CodeStream, limits: Optional[Sequence[int]]) -> pd.DataFrame:
    """Per-branch utilization and perplexity (needs the code limits)."""
    if limits is None:
        return pd.DataFrame(columns=['branch', 'codebook_size', 'codes_used', 'utilization', 'perplexity'])
    rows = []
    for p, tracker in enumerate(branch_trackers(stream, limits)):
        rows.append({
            'branch': p,
            'codebook_size': tracker.size,
            'codes_used': tracker.used,
            'utilization': utilization(tracker),
            'perplexity': codebook_perplexity(tracker),
        })
    return pd.DataFrame(rows)


def summary_lines(stream: CodeStream, bits: Optional[int], usage: pd.DataFrame,
                  histogram: pd.DataFrame) -> List[str]:
    """Line-oriented key=value report."""
    lines = [
        f"variant={stream.variant}",
        f"side={stream.side}",
        f"schedule={','.join(str(s) for s in stream.resolutions)}",
        f"branches={stream.branches}",
        f"active_steps={stream.active_steps}",
        f"tokens={stream.tokens}",
    ]
    if bits is not None:
        lines.append(f"bits={bits}")
    for row in usage.itertuples(index=False):
        lines.append(f"utilization.p{row.branch}={row.utilization:.6f}")
        lines.append(f"perplexity.p{row.branch}={row.perplexity:.6f}")
    for (p, i), group in histogram.groupby(['branch', 'step'], sort=True):
        pairs = ','.join(f"{c}:{n}" for c, n in zip(group['code'], group['count']))
        lines.append(f"histogram.p{p}.s{i}={pairs}")
    return lines


class StatsChartExporter:
    """Plotly figures for stream statistics."""

    @staticmethod
    def usage_figure(stream: CodeStream, histogram: pd.DataFrame, usage: pd.DataFrame) -> go.Figure:
        fig = make_subplots(
            rows=1, cols=2,
            subplot_titles=["Distinct codes per step", "Codebook utilization"],
        )
        for p in range(stream.branches):
            per_step = histogram[histogram['branch'] == p].groupby('step')['code'].nunique()
            fig.add_trace(
                go.Bar(x=[f"s{i} ({stream.resolutions[i]}x{stream.resolutions[i]})" for i in per_step.index],
                       y=per_step.values, name=f"branch {p}"),
                row=1, col=1
            )
        if not usage.empty:
            fig.add_trace(
                go.Bar(x=[f"branch {p}" for p in usage['branch']], y=usage['utilization'],
                       name="utilization", marker_color="#0B3B5A"),
                row=1, col=2
            )
        fig.update_layout(
            height=500,
            title_text=f"{stream.variant}: {stream.tokens} tokens",
            title_x=0.5,
            barmode='group',
        )
        return fig

    @staticmethod
    def export_html(stream: CodeStream, histogram: pd.DataFrame, usage: pd.DataFrame) -> bytes:
        fig = StatsChartExporter.usage_figure(stream, histogram, usage)
        # fixed div id keeps the output byte-reproducible
        html = fig.to_html(full_html=True, include_plotlyjs='cdn', div_id='xq-stats')
        return html.encode('utf-8')


def stats_tables(stream: CodeStream, limits: Optional[Sequence[int]]) -> Dict[str, pd.DataFrame]:
    return {
        'histogram': histogram_frame(stream),
        'usage': usage_frame(stream, limits),
    }
