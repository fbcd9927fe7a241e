# test_summary_and_charts.py
import pandas as pd
import pytest

from ranking_metrics import MetricsReport
from summary_generator import analyze_run, analyze_sweep
from sweep_visualizations import plot_sweep, write_sweep_chart


@pytest.fixture
def sweep_rows():
    return pd.DataFrame({
        'lambda': [0.01, 0.01, 0.1, 0.1, 1.0, 1.0],
        'seed': [42, 43, 42, 43, 42, 43],
        'candidate_index': [1, 1, 2, 2, 3, 3],
        'layers': [4, 4, 3, 2, 1, 1],
        'flops': [900, 1000, 600, 500, 100, 100],
        'test_recall': [0.30, 0.32, 0.28, 0.30, 0.20, 0.22],
        'test_ndcg': [0.20, 0.22, 0.18, 0.20, 0.10, 0.12],
    })


class TestAnalyzeSweep:
    def test_medians_and_picks(self, sweep_rows):
        text = analyze_sweep(sweep_rows, 'lambda', 'lambda', k=10)
        assert '3 settings, 2 seed(s) per setting' in text
        assert 'lambda = 0.01: median FLOPs 950' in text
        assert 'candidate 1 x 4 layers (2x)' in text
        assert 'candidate 2 x 3 layers' in text and 'candidate 2 x 2 layers' in text
        assert 'non-increasing as lambda grows' in text
        assert 'Runs selected 4 different architectures' in text

    def test_non_monotone(self, sweep_rows):
        rows = sweep_rows.copy()
        rows.loc[rows['lambda'] == 1.0, 'flops'] = 5000
        assert 'not monotone' in analyze_sweep(rows, 'lambda', 'lambda')

    def test_single_architecture(self):
        rows = pd.DataFrame({'gate_layers': [0, 1], 'candidate_index': [2, 2], 'layers': [3, 3],
                             'flops': [10, 20], 'test_recall': [0.1, 0.2], 'test_ndcg': [0.1, 0.1]})
        text = analyze_sweep(rows, 'gate_layers', 'gate depth')
        assert 'same architecture (candidate 2 x 3 layers)' in text

    def test_empty(self):
        assert analyze_sweep(pd.DataFrame(), 'lambda', 'lambda') == "No sweep results were recorded.\n"


class TestAnalyzeRun:
    def test_compares_against_baselines(self):
        text = analyze_run(MetricsReport(0.5, 0.3, 0.35, 10, 200), MetricsReport(0.1, 0.05, 0.06, 10, 200),
                           num_items=100, flops=123456)
        assert 'Test Recall@10 0.5000' in text
        assert 'reaches 5.0x that' in text
        assert 'Random ranking expects Recall@10 0.1000' in text
        assert '123,456 FLOPs' in text

    def test_zero_baseline(self):
        text = analyze_run(MetricsReport(0.5, 0.3, 0.35, 10, 200), MetricsReport(0.0, 0.0, 0.0, 10, 200), 100)
        assert 'Popularity baseline Recall@10 is 0.' in text
        assert 'FLOPs' not in text


class TestSweepChart:
    def test_traces(self, sweep_rows):
        fig = plot_sweep(sweep_rows, 'lambda', 'lambda')
        bars, line = fig.data
        assert list(bars.x) == ['0.01', '0.1', '1.0']
        assert list(bars.y) == [950, 550, 100]
        assert list(line.y) == pytest.approx([0.31, 0.29, 0.21])
        assert fig.layout.yaxis2.overlaying == 'y'

    def test_empty(self):
        fig = plot_sweep(pd.DataFrame(), 'lambda', 'lambda')
        assert len(fig.data) == 0
        assert fig.layout.title.text == 'No sweep results available'

    def test_written_html(self, tmp_path, sweep_rows):
        path = tmp_path / 'sweep_chart.html'
        write_sweep_chart(plot_sweep(sweep_rows, 'lambda', 'lambda'), path)
        html = path.read_text()
        assert html.lstrip().startswith('<html>')
        assert 'cdn.plot.ly' in html
