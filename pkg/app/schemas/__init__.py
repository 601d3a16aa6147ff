# Pydantic schemas for experiment configuration, reports and the HTTP API
