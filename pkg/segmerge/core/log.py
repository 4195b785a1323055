import os
import sys

from loguru import logger

logger.remove()
logger.add(sys.stderr, level=os.getenv("SEGMERGE_LOG_LEVEL", "INFO"))
logger.add(os.getenv("SEGMERGE_LOG_FILE", "segmerge.log"), level="DEBUG", rotation="50 MB", encoding="utf-8")
log = logger


def setup_logging(level: str = "INFO", log_file: str = "segmerge.log", rotation: str = "50 MB") -> None:
    """按 bench.yaml / 环境变量重新配置日志输出"""
    level = os.getenv("SEGMERGE_LOG_LEVEL", level)
    log_file = os.getenv("SEGMERGE_LOG_FILE", log_file)
    logger.remove()
    logger.add(sys.stderr, level=level)
    if log_file:
        logger.add(log_file, level="DEBUG", rotation=rotation, encoding="utf-8")


if __name__ == '__main__':
    log.debug('debug 调试信息')
    log.info('info 正常')
    log.warning('warning 警告')
    log.error('error 错误')
