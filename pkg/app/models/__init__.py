# Pydantic models: run parameters, scene scripts, reports and API payloads.
