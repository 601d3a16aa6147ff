from app.core.config import Settings, settings


def get_settings() -> Settings:
    """Process settings; overridable in tests through app.dependency_overrides."""
    return settings


__all__ = ["get_settings"]
