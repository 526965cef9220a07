"""Match pair page: upload two images, run a checkpoint, inspect matches and pruning masks."""

import cv2
import numpy as np
import plotly.express as px
import plotly.graph_objects as go
import streamlit as st
import torch

from config import DEVICE
from scalematch.errors import MatchError
from scalematch.evaluate import match_pair
from scalematch.model import PruningMatcher
from scalematch.synthetic import ImagePair


@st.cache_resource
def load_model(path: str) -> PruningMatcher:
    return PruningMatcher.from_checkpoint(path, device=DEVICE)


def _decode(upload) -> torch.Tensor:
    data = np.frombuffer(upload.getvalue(), dtype=np.uint8)
    bgr = cv2.imdecode(data, cv2.IMREAD_COLOR)
    if bgr is None:
        raise ValueError(f"Could not decode {upload.name}")
    rgb = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0
    return torch.from_numpy(np.ascontiguousarray(rgb.transpose(2, 0, 1)))


def matches_figure(image_a: np.ndarray, image_b: np.ndarray, points_a, points_b, conf) -> go.Figure:
    """Side-by-side canvas with one line per match, colored by confidence."""
    h = max(image_a.shape[0], image_b.shape[0])
    canvas = np.zeros((h, image_a.shape[1] + image_b.shape[1], 3), dtype=np.uint8)
    canvas[: image_a.shape[0], : image_a.shape[1]] = image_a
    canvas[: image_b.shape[0], image_a.shape[1]:] = image_b

    fig = px.imshow(canvas)
    offset = image_a.shape[1]
    for (xa, ya), (xb, yb), c in zip(points_a, points_b, conf):
        fig.add_trace(go.Scatter(
            x=[xa, xb + offset], y=[ya, yb], mode="lines",
            line=dict(width=1, color=f"rgba(0, 255, 0, {0.3 + 0.7 * float(c):.2f})"),
            hoverinfo="skip", showlegend=False,
        ))
    fig.update_layout(margin=dict(l=0, r=0, t=0, b=0), height=500)
    return fig


def match_pair_page():
    st.title("🔗 Match pair")

    checkpoint = st.text_input("Checkpoint path", value=st.session_state.get("checkpoint_path", "runs/toy/checkpoint.bin"))
    col1, col2 = st.columns(2)
    with col1:
        upload_a = st.file_uploader("Image A", type=["png", "jpg", "jpeg"], key="image_a")
    with col2:
        upload_b = st.file_uploader("Image B", type=["png", "jpg", "jpeg"], key="image_b")

    col1, col2 = st.columns(2)
    with col1:
        theta_c = st.slider("Coarse threshold θ_c", 0.01, 0.99, 0.2, 0.01)
    with col2:
        theta_p = st.slider("Pruning threshold θ_p", 0.01, 0.99, 0.05, 0.01)

    if not (upload_a and upload_b):
        st.info("Upload two images to match them.")
        return
    if not st.button("Run matcher", type="primary"):
        return

    st.session_state.checkpoint_path = checkpoint
    try:
        model = load_model(checkpoint)
        pair = ImagePair(image_a=_decode(upload_a), image_b=_decode(upload_b), name="upload")
        with st.spinner("Matching..."):
            points_a, points_b, fine, out = match_pair(model, pair, theta_c=theta_c, theta_p=theta_p, device=DEVICE)
    except (MatchError, ValueError) as e:
        st.error(f"❌ {e}")
        return

    col1, col2, col3 = st.columns(3)
    col1.metric("Matches", len(fine))
    col2.metric("Kept patches A", f"{float(out.mpm.final_mask_a.float().mean()):.0%}")
    col3.metric("Kept patches B", f"{float(out.mpm.final_mask_b.float().mean()):.0%}")

    to_uint8 = lambda t: (t.numpy().transpose(1, 2, 0) * 255).astype(np.uint8)  # noqa: E731
    st.plotly_chart(
        matches_figure(to_uint8(pair.image_a), to_uint8(pair.image_b), points_a, points_b, fine.conf.cpu().numpy()),
        use_container_width=True,
    )

    st.subheader("Pruning masks per layer")
    for name, masks, grid in (("A", out.mpm.masks_a, out.grid_a), ("B", out.mpm.masks_b, out.grid_b)):
        cols = st.columns(len(masks))
        for layer, (col, mask) in enumerate(zip(cols, masks)):
            with col:
                st.caption(f"{name} · layer {layer}")
                st.image(mask[0].reshape(grid).cpu().numpy().astype(np.uint8) * 255, clamp=True, use_column_width=True)
