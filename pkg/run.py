import uvicorn
import os

# Load environment variables from .env file
try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass  # python-dotenv not installed, skip loading

if __name__ == "__main__":
    checkpoint = os.environ.get("SALVIT_CHECKPOINT", "<unset>")
    print(f"Serving keypoint detector from: {checkpoint}")
    host = os.environ.get("SALVIT_HOST", "127.0.0.1")
    port = int(os.environ.get("SALVIT_PORT", "3111"))
    uvicorn.run("server.api:app", host=host, port=port, reload=False)
