"""Main ScaleMatch Streamlit application: match explorer and evaluation report viewer."""

import streamlit as st

from config import APP_ICON, APP_NAME, PAGE_TITLE
from internal_pages.explorer import match_pair_page
from internal_pages.report import evaluation_report_page

PAGES = {
    "🔗 Match pair": match_pair_page,
    "📈 Evaluation report": evaluation_report_page,
}


def configure_page():
    """Configure Streamlit page settings."""
    st.set_page_config(
        page_title=PAGE_TITLE,
        page_icon=APP_ICON,
        layout="wide",
        initial_sidebar_state="expanded",
        menu_items={
            'Get Help': None,
            'Report a bug': None,
            'About': None
        }
    )


def sidebar_navigation():
    """Handle sidebar navigation."""
    with st.sidebar:
        st.markdown(f"## {APP_ICON} {APP_NAME}")

        for label in PAGES:
            if st.button(label, key=f"nav_{label}", use_container_width=True):
                st.session_state.current_page = label

        st.divider()
        st.caption("Coarse-to-fine matching with multi-scale patch pruning")
        return st.session_state.get('current_page', next(iter(PAGES)))


def main():
    """Main application logic."""
    configure_page()
    if 'current_page' not in st.session_state:
        st.session_state.current_page = next(iter(PAGES))

    selected_page = sidebar_navigation()
    PAGES[selected_page]()


if __name__ == "__main__":
    main()
