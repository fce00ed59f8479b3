import logging

from . import models  # noqa: F401  registers the tables on Base
from .database import Base, engine

logger = logging.getLogger(__name__)


def init_db(bind=None):
    bind = bind or engine
    Base.metadata.create_all(bind=bind)
    logger.info("run registry ready at %s", bind.url)


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    init_db()
