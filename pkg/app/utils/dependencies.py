from fastapi import HTTPException, Path, status

from ..core.errors import MultiMotionError
from ..models.scene import SceneScript
from ..services.sim import builtin_scenarios


def validate_scenario_name_sync(name: str) -> SceneScript:
    """
    Looks up a builtin scenario by name.
    Raises HTTPException 404 if no scenario has that name.
    """
    if not name or not isinstance(name, str):
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail="Scenario name must be a non-empty string")
    scenarios = builtin_scenarios()
    if name not in scenarios:
        raise HTTPException(
            status_code=status.HTTP_404_NOT_FOUND,
            detail=f"Scenario '{name}' not found (available: {', '.join(sorted(scenarios))})",
        )
    return scenarios[name]


async def validate_scenario_name(name: str = Path(..., description="Builtin scenario name")) -> SceneScript:
    """Dependency resolving a path parameter to a builtin scenario."""
    return validate_scenario_name_sync(name)


def engine_error(e: MultiMotionError) -> HTTPException:
    """Maps an engine error onto a 400 response."""
    return HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=f"{type(e).__name__}: {e}")
