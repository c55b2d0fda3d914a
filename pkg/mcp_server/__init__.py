# EmoAug MCP Server
