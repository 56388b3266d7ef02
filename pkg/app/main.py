import os

from dotenv import load_dotenv
from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

# Import API routes
from app.api.routes import router as api_router
from app.core.config import PipelineConfig

load_dotenv()

APP_NAME = "kiwical"
APP_VERSION = "0.1.0"

# Create FastAPI app
app = FastAPI(
    title="Calyx Detection Service",
    description="Lighting-aware calyx detection and evaluation for orchard canopy images",
    version=APP_VERSION,
)

# Configure CORS
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

# Include API routes
app.include_router(api_router, prefix="/api")


# Health check endpoint
@app.get("/health")
async def health_check():
    return {"status": "healthy"}


# Metadata endpoint
@app.get("/metadata")
async def metadata():
    return {
        "name": APP_NAME,
        "version": APP_VERSION,
        "data_dir": os.getenv("KIWICAL_DATA_DIR", "./data"),
        "pipeline": PipelineConfig().model_dump(mode="json"),
    }
