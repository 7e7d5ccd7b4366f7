import logging
import os
from typing import List

import pandas as pd
import streamlit as st
from dotenv import load_dotenv

from consensus_marl.core.errors import ConfigurationError
from consensus_marl.metrics import plot_data, read_metrics_csv, tail_mean
from consensus_marl.plots import final_positions, plot_agent_returns, plot_end_state, plot_returns, read_trajectory

# Load environment variables
load_dotenv()

# Setup logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

# Page configuration
st.set_page_config(
    page_title="Consensus Attack Results",
    page_icon="📈",
    layout="wide",
    initial_sidebar_state="expanded"
)

# Custom styling
st.markdown("""
<style>
    .main-header {
        font-size: 2.5rem;
        color: #1E88E5;
        text-align: center;
        margin-bottom: 2rem;
    }
    .sub-header {
        font-size: 1.5rem;
        color: #1565C0;
        margin-top: 2rem;
        margin-bottom: 1rem;
    }
</style>
""", unsafe_allow_html=True)


def list_csv_files(directory: str) -> List[str]:
    if not os.path.isdir(directory):
        return []
    return sorted(os.path.join(directory, f) for f in os.listdir(directory) if f.endswith(".csv"))


def load_runs(paths: List[str]) -> List[pd.DataFrame]:
    frames = []
    for path in paths:
        try:
            frames.append(read_metrics_csv(path))
        except ConfigurationError as e:
            logger.warning(f"Skipping {path}: {e}")
            st.warning(f"Skipped {os.path.basename(path)}: not a metrics file")
    return frames


def summary_table(frames: List[pd.DataFrame], fraction: float) -> pd.DataFrame:
    rows = []
    for frame in frames:
        if frame.empty:
            continue
        agents = [c for c in frame.columns if c.startswith("return_agent_")]
        row = {"scenario": frame["scenario"].iloc[0], "seed": int(frame["seed"].iloc[0]), "episodes": len(frame)}
        row.update({c.replace("return_", ""): tail_mean(frame, c, fraction) for c in agents})
        row["team_return"] = tail_mean(frame, "team_return", fraction)
        row["cooperative_return"] = tail_mean(frame, "cooperative_return", fraction)
        row["final_disagreement"] = float(frame["disagreement"].iloc[-1])
        rows.append(row)
    return pd.DataFrame(rows)


def returns_tab(frames: List[pd.DataFrame]):
    window = st.slider("Smoothing window (episodes)", 1, 50, 10)
    data = plot_data(frames, window)
    st.pyplot(plot_returns(data))
    scenario = st.selectbox("Per-agent returns for scenario", sorted(data["scenario"].unique()))
    adversary = st.number_input("Adversary id (-1 for none)", min_value=-1, value=1, step=1)
    st.pyplot(plot_agent_returns(data, scenario, None if adversary < 0 else int(adversary)))
    fraction = st.slider("Tail fraction for summaries", 0.05, 1.0, 0.1)
    st.markdown("<h3 class='sub-header'>Tail means</h3>", unsafe_allow_html=True)
    st.dataframe(summary_table(frames, fraction))


def end_state_tab(directory: str):
    trajectories = [p for p in list_csv_files(directory) if p.endswith("_end.csv")]
    if not trajectories:
        st.info("No trajectory files (*_end.csv) found. Use `cli.py run --trajectory` to record one.")
        return
    path = st.selectbox("Trajectory", trajectories)
    trajectory = read_trajectory(path)
    if "state" in trajectory.columns:
        st.line_chart(trajectory.set_index("step")["state"])
        return
    width = st.number_input("Grid width", min_value=1, value=4)
    height = st.number_input("Grid height", min_value=1, value=4)
    desired_text = st.text_input("Desired cells (x,y;x,y;...)", "0,0;3,3;3,0")
    try:
        desired = [tuple(int(c) for c in cell.split(",")) for cell in desired_text.split(";")]
    except ValueError:
        st.error("Desired cells must look like 0,0;3,3;3,0")
        return
    adversary = st.number_input("Adversary id (-1 for none)", min_value=-1, value=1, step=1, key="end_adv")
    st.pyplot(plot_end_state(final_positions(trajectory), desired, int(width), int(height),
                             None if adversary < 0 else int(adversary)))


def main():
    st.markdown("<h1 class='main-header'>Consensus Actor-Critic Under Attack</h1>", unsafe_allow_html=True)
    st.markdown("""
    Compare finished clean and attacked runs. Produce metrics with `python cli.py run`,
    then point the sidebar at the output directory.
    """)

    with st.sidebar:
        st.markdown("## Results")
        directory = st.text_input("Output directory", os.getenv("CONSENSUS_MARL_OUTPUT_DIR", "."))
        candidates = [p for p in list_csv_files(directory) if not p.endswith(("_end.csv", "_steps.csv"))]
        selected = st.multiselect("Metrics files", candidates, default=candidates[:2])

    tab1, tab2 = st.tabs(["Returns", "End State"])

    with tab1:
        frames = load_runs(selected)
        if frames:
            returns_tab(frames)
        else:
            st.info("Select at least one metrics CSV in the sidebar.")

    with tab2:
        end_state_tab(directory)


if __name__ == "__main__":
    main()
