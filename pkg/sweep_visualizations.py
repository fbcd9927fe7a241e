# sweep_visualizations.py
import plotly.graph_objects as go

from artifacts import atomic_write_text


def plot_sweep(results, setting_col, setting_label, metric_col='test_recall', flops_col='flops', k=10):
    """
    Median metric per setting (left axis) against median selected FLOPs (right axis).

    Args:
        results: sweep rows, one per (setting, seed)
        setting_col: column holding the swept value
        setting_label: axis title for the swept value

    Returns:
        plotly Figure
    """
    if results is None or results.empty:
        return go.Figure().update_layout(title="No sweep results available", height=300)

    medians = results.groupby(setting_col)[[metric_col, flops_col]].median().reset_index()
    x_values = [str(v) for v in medians[setting_col]]

    fig = go.Figure()
    fig.add_trace(go.Bar(
        x=x_values,
        y=medians[flops_col],
        name='Selected FLOPs (median)',
        marker_color='rgba(200,200,200,0.7)',
        hovertemplate="<b>FLOPs:</b> %{y:,.0f}<br>",
        yaxis='y2'
    ))
    fig.add_trace(go.Scatter(
        x=x_values,
        y=medians[metric_col],
        mode='lines+markers',
        name=f'Test Recall@{k} (median)',
        line=dict(color='#4B90B0', width=2),
        hovertemplate=f"<b>Recall@{k}:</b> %{{y:.4f}}<br>",
        yaxis='y'
    ))

    fig.update_layout(
        height=400,
        margin=dict(t=40, b=40, l=60, r=60),
        xaxis=dict(title=setting_label, type='category', showgrid=True, gridcolor='rgba(211,211,211,0.3)'),
        yaxis=dict(title=f'Recall@{k}', tickformat='.3f', gridcolor='rgba(211,211,211,0.3)', side='left'),
        yaxis2=dict(
            title='FLOPs',
            title_font=dict(color='rgba(128,128,128,0.8)'),
            tickfont=dict(color='rgba(128,128,128,0.8)'),
            tickformat=',.0f',
            overlaying='y',
            side='right',
            showgrid=False
        ),
        legend=dict(orientation="h", yanchor="bottom", y=1.02, xanchor="right", x=1),
        template='plotly_white',
        hovermode='x unified'
    )
    return fig


def write_sweep_chart(fig, path):
    """Standalone HTML; plotly.js is loaded from the CDN."""
    atomic_write_text(path, fig.to_html(include_plotlyjs='cdn', full_html=True))
