#include <csignal>
#include <iostream>

#include "dseg/cli.hpp"
#include "dseg/http_api.hpp"

namespace {

httplib::Server* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

int serve(const std::filesystem::path& checkpoint, const std::optional<dseg::RunConfig>& cfg,
          const std::string& host, int port, const std::string& sessions_dir, std::ostream& out) {
  using namespace dseg::service;
  std::optional<std::filesystem::path> dir;
  if (!sessions_dir.empty()) dir = sessions_dir;
  SessionStore store(dseg::load_checkpoint(checkpoint), dir);
  SampleCatalog catalog;
  if (cfg) catalog.samples = dseg::split_by_id(dseg::cli::detail::load_samples(*cfg)).val;
  httplib::Server srv;
  register_routes(srv, store, &catalog);
  if (!srv.bind_to_port(host, port)) throw dseg::ConfigError("cannot bind " + host + ":" + std::to_string(port));
  g_server = &srv;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  out << "listening on http://" << host << ':' << port << "/v1 (" << store.experts() << " experts, "
      << catalog.samples.size() << " samples)" << std::endl;
  srv.listen_after_bind();
  g_server = nullptr;
  return dseg::cli::kExitOk;
}

}  // namespace

int main(int argc, char** argv) { return dseg::cli::run(argc, argv, std::cout, std::cerr, serve); }
