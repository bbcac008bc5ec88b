import logging

from config.config import LOG_LEVEL

# Configure logging
logging.basicConfig(
    level=getattr(logging, LOG_LEVEL, logging.INFO),
    format='%(asctime)s %(levelname)s %(name)s: %(message)s'
)
logger = logging.getLogger(__name__)


def create_app():
    """Create and configure the pipeline application."""
    try:
        from app.routes.main_routes import main
        logger.debug(f"Registered commands: {sorted(main.commands)}")
        return main
    except Exception as e:
        logger.error(f"Error creating app: {str(e)}")
        raise
