from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from src.routes import jobs, identities
from src.config.settings import settings
from src.config.logging_config import setup_logging, get_logger
from src.backgroundworker.job_worker import job_worker
from src.utils.env_utils import configure_torch, get_run_config, get_runtime_info, validate_run_paths

# Setup logging configuration
setup_logging()
logger = get_logger(__name__)

app = FastAPI(
    title=settings.app_name,
    description="Deformable-template neural SDF reconstruction: training jobs and identity rendering",
    version=settings.version,
    debug=settings.debug
)

# Add CORS middleware
app.add_middleware(
    CORSMiddleware,
    allow_origins=settings.cors_origins,
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

# Include routers
app.include_router(jobs.router, prefix=settings.api_prefix, tags=["jobs"])
app.include_router(identities.router, prefix=settings.api_prefix, tags=["identities"])


@app.get("/")
def read_root():
    return {
        "message": f"Welcome to {settings.app_name}!",
        "version": settings.version,
        "environment": settings.environment,
        "debug": settings.debug,
        "features": ["template_training", "identity_refinement", "identity_rendering", "background_jobs"]
    }


@app.get("/health")
def health_check():
    paths = validate_run_paths()
    return {
        "status": "healthy",
        "environment": settings.environment,
        "dataset_available": paths["DATA_DIR"],
        "config_available": paths["CONFIG_PATH"],
        "jobs": len(job_worker.list_jobs()),
    }


@app.get("/config")
def get_config():
    """Get current configuration (useful for debugging)"""
    return {
        "app_name": settings.app_name,
        "environment": settings.environment,
        "debug": settings.debug,
        "host": settings.host,
        "port": settings.port,
        "api_prefix": settings.api_prefix,
        "run": get_run_config(),
        "runtime": get_runtime_info(),
        "path_validation": validate_run_paths(),
    }


# Startup and shutdown events
@app.on_event("startup")
async def startup_event():
    """Initialize application on startup"""
    logger.info(f"Starting {settings.app_name} v{settings.version}")
    logger.info(f"Environment: {settings.environment}")
    configure_torch(settings.torch_threads)

    missing = [name for name, valid in validate_run_paths().items() if not valid]
    if missing:
        logger.warning(f"Missing run locations: {missing}")


@app.on_event("shutdown")
async def shutdown_event():
    """Cleanup on application shutdown"""
    logger.info("Shutting down application...")
    job_worker.shutdown(wait=False)
    logger.info("Application shutdown complete")
