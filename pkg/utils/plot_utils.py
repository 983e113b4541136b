"""
Plotly figures for the analysis tables.
Figures are written as standalone HTML next to the CSV they were drawn from.
"""

import plotly.express as px

COLORS = ['#2563eb', '#059669', '#dc2626', '#d97706', '#7c3aed', '#0284c7']


def _style(fig, title):
    fig.update_layout(
        font=dict(family="Inter, sans-serif"),
        plot_bgcolor='white',
        paper_bgcolor='white',
        title=dict(text=title, font=dict(size=18, color='#1e293b')),
        margin=dict(t=60, b=40, l=40, r=40)
    )
    return fig


def traversal_figure(frame, dim):
    fig = px.line(frame, x='value', y='edit_distance', markers=True,
                  color_discrete_sequence=COLORS)
    return _style(fig, f"Latent traversal of dimension {dim}")


def correlation_figure(frame, dim):
    fig = px.scatter(frame, x='z', y='acc', color='flops',
                     color_continuous_scale='Viridis')
    return _style(fig, f"Dimension {dim} vs accuracy (color: FLOPS)")


def history_figure(frame):
    fig = px.line(frame, x='queries_used', y='best_oracle_acc', markers=True,
                  color_discrete_sequence=COLORS)
    return _style(fig, "Best oracle accuracy by queries used")


def write_figure(fig, path):
    fig.write_html(str(path), include_plotlyjs='cdn')
