"""HTTP service (FastAPI) exposing validation, estimation, phase selection and runs."""
