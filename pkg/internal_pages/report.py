"""Evaluation report page: AUC table and cumulative error curves from a saved report."""

from pathlib import Path

import pandas as pd
import plotly.express as px
import streamlit as st

from scalematch.metrics import ErrorCurve


def evaluation_report_page():
    st.title("📈 Evaluation report")

    report_path = st.text_input("Report file", value="report.txt")
    path = Path(report_path)
    if not path.is_file():
        st.info("Run `python cli.py eval-homography ... --report <file>` and enter the report path.")
        return

    st.subheader("AUC")
    st.code(path.read_text(encoding="utf-8"), language="text")

    errors_path = path.with_suffix(".csv")
    if not errors_path.is_file():
        st.error(f"❌ Per-pair errors not found next to the report ({errors_path.name})")
        return

    errors = pd.read_csv(errors_path)["error"].to_numpy()
    max_t = st.slider("Maximum threshold", 1.0, 50.0, 10.0, 1.0)
    curve = ErrorCurve(errors, thresholds=(max_t,)).cumulative(max_threshold=max_t)
    fig = px.line(curve, x="threshold", y="fraction", labels={"fraction": "fraction of pairs"})
    fig.update_yaxes(range=[0, 1])
    st.plotly_chart(fig, use_container_width=True)

    col1, col2 = st.columns(2)
    col1.metric("Pairs", len(errors))
    col2.metric(f"AUC@{max_t:g}", f"{ErrorCurve(errors, (max_t,)).aucs()[max_t]:.3f}")
