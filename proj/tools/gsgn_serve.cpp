// gsgn-serve: HTTP inference endpoint for a generator checkpoint.

#include <CLI11.hpp>

#include <csignal>
#include <iostream>

#include "gsgn/service.hpp"

namespace {
httplib::Server* g_server = nullptr;
void stop(int) {
  if (g_server) g_server->stop();
}
}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GSGN inference service"};
  std::string checkpoint, host = "127.0.0.1";
  int port = 8080;
  std::size_t max_edge = 1024;
  app.add_option("--checkpoint", checkpoint, "Generator checkpoint to serve (omit to start unloaded)");
  app.add_option("--host", host, "Bind address")->capture_default_str();
  app.add_option("--port", port, "Port")->capture_default_str();
  app.add_option("--max-edge", max_edge, "Largest accepted image side")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  gsgn::EnhanceService service(gsgn::ServiceOptions{max_edge});
  try {
    if (!checkpoint.empty()) service.load_file(checkpoint);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  httplib::Server server;
  service.mount(server);
  g_server = &server;
  std::signal(SIGINT, stop);
  std::signal(SIGTERM, stop);
  std::cerr << "listening on " << host << ":" << port << "\n";
  if (!server.listen(host, port)) {
    std::cerr << "error: cannot bind " << host << ":" << port << "\n";
    return 1;
  }
  return 0;
}
